//! MNIST in the IDX format: big-endian u32 magic, big-endian u32 extents,
//! then a u8 payload.

use std::path::{Path, PathBuf};

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn parse_err(name: &str, offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        source_name: name.to_string(),
        offset: offset as u64,
        message: message.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, name: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| parse_err(name, bytes.len(), "truncated header"))
}

pub fn parse_idx_images(bytes: &[u8], name: &str) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0, name)?;
    if magic != IMAGES_MAGIC {
        return Err(parse_err(
            name,
            0,
            format!("image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(bytes, 4, name)? as usize;
    let rows = be_u32(bytes, 8, name)? as usize;
    let cols = be_u32(bytes, 12, name)? as usize;
    let expected = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() != expected {
        return Err(parse_err(
            name,
            bytes.len(),
            format!(
                "payload holds {} bytes, header promises {count}x{rows}x{cols} = {expected}",
                payload.len()
            ),
        ));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: payload.to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8], name: &str) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, name)?;
    if magic != LABELS_MAGIC {
        return Err(parse_err(
            name,
            0,
            format!("label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(bytes, 4, name)? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(parse_err(
            name,
            bytes.len(),
            format!(
                "payload holds {} labels, header promises {count}",
                payload.len()
            ),
        ));
    }
    if let Some(pos) = payload.iter().position(|&l| l > 9) {
        return Err(parse_err(
            name,
            8 + pos,
            format!("label {} outside 0..=9", payload[pos]),
        ));
    }
    Ok(payload.to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [
        IMAGES_MAGIC,
        images.count as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Inverse of the `/255` feature scaling.
pub fn features_to_pixels(features: &[f64]) -> Vec<u8> {
    features
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses one image/label file pair into `[N, 1, rows, cols]` features in
/// `[0, 1]` and labels.
pub fn load_idx_pair(images_path: &Path, labels_path: &Path) -> Result<(Tensor, Vec<usize>)> {
    let iname = images_path.display().to_string();
    let lname = labels_path.display().to_string();
    let images = parse_idx_images(&read(images_path)?, &iname)?;
    let labels = parse_idx_labels(&read(labels_path)?, &lname)?;
    if images.count != labels.len() {
        return Err(parse_err(
            &lname,
            4,
            format!("{} labels for {} images", labels.len(), images.count),
        ));
    }
    let features = Tensor::from_vec(
        &[images.count, 1, images.rows, images.cols],
        images
            .pixels
            .iter()
            .map(|&p| f64::from(p) / 255.0)
            .collect(),
    )?;
    Ok((features, labels.into_iter().map(usize::from).collect()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MnistFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistFiles {
    /// The four canonical uncompressed file names inside `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        MnistFiles {
            train_images: dir.join("train-images-idx3-ubyte"),
            train_labels: dir.join("train-labels-idx1-ubyte"),
            test_images: dir.join("t10k-images-idx3-ubyte"),
            test_labels: dir.join("t10k-labels-idx1-ubyte"),
        }
    }

    pub fn exist(&self) -> bool {
        [
            &self.train_images,
            &self.train_labels,
            &self.test_images,
            &self.test_labels,
        ]
        .iter()
        .all(|p| p.is_file())
    }
}

/// Train and test files concatenated; the split is the files' own split.
pub fn load_mnist(files: &MnistFiles) -> Result<LabeledDataset> {
    let (train_x, train_y) = load_idx_pair(&files.train_images, &files.train_labels)?;
    let (test_x, test_y) = load_idx_pair(&files.test_images, &files.test_labels)?;
    if train_x.dims()[1..] != test_x.dims()[1..] {
        return Err(Error::Data(format!(
            "train images {:?} and test images {:?} differ in shape",
            train_x.dims(),
            test_x.dims()
        )));
    }
    let (n_train, n_test) = (train_y.len(), test_y.len());
    let mut dims = train_x.dims().to_vec();
    dims[0] = n_train + n_test;
    let mut data = train_x.into_data();
    data.extend(test_x.into_data());
    let labels = train_y.into_iter().chain(test_y).collect();
    LabeledDataset::new(
        Tensor::from_vec(&dims, data)?,
        labels,
        (0..10).map(|d| d.to_string()).collect(),
        (0..n_train).collect(),
        (n_train..n_train + n_test).collect(),
    )
}
