//! CIFAR-10 binary batches: 3073-byte records, a label byte followed by the
//! 1024-byte red, green and blue planes of a 32x32 image.

use std::path::{Path, PathBuf};

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RECORD_LEN: usize = 1 + 3 * 32 * 32;

pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CifarBatch {
    pub labels: Vec<u8>,
    /// Channel-planar pixels, `3072` per record.
    pub pixels: Vec<u8>,
}

pub fn parse_cifar_batch(bytes: &[u8], name: &str) -> Result<CifarBatch> {
    let tail = bytes.len() % RECORD_LEN;
    if tail != 0 {
        return Err(Error::Parse {
            source_name: name.to_string(),
            offset: (bytes.len() - tail) as u64,
            message: format!(
                "file length {} is not a multiple of the {RECORD_LEN}-byte record",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / RECORD_LEN;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (RECORD_LEN - 1));
    for (r, rec) in bytes.chunks_exact(RECORD_LEN).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Parse {
                source_name: name.to_string(),
                offset: (r * RECORD_LEN) as u64,
                message: format!("label {} outside 0..=9", rec[0]),
            });
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok(CifarBatch { labels, pixels })
}

pub fn encode_cifar_batch(batch: &CifarBatch) -> Vec<u8> {
    let mut out = Vec::with_capacity(batch.labels.len() * RECORD_LEN);
    for (label, px) in batch
        .labels
        .iter()
        .zip(batch.pixels.chunks_exact(RECORD_LEN - 1))
    {
        out.push(*label);
        out.extend_from_slice(px);
    }
    out
}

fn load_batches(paths: &[PathBuf]) -> Result<CifarBatch> {
    let mut all = CifarBatch {
        labels: Vec::new(),
        pixels: Vec::new(),
    };
    for path in paths {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let b = parse_cifar_batch(&bytes, &path.display().to_string())?;
        all.labels.extend(b.labels);
        all.pixels.extend(b.pixels);
    }
    Ok(all)
}

/// The standard file names `data_batch_{1..5}.bin` and `test_batch.bin`.
pub fn standard_batches(dir: &Path) -> (Vec<PathBuf>, Vec<PathBuf>) {
    (
        (1..=5)
            .map(|i| dir.join(format!("data_batch_{i}.bin")))
            .collect(),
        vec![dir.join("test_batch.bin")],
    )
}

/// Features `[N, 3, 32, 32]` in `[0, 1]`; training batches first.
pub fn load_cifar10(train_batches: &[PathBuf], test_batches: &[PathBuf]) -> Result<LabeledDataset> {
    let train = load_batches(train_batches)?;
    let test = load_batches(test_batches)?;
    let (n_train, n_test) = (train.labels.len(), test.labels.len());
    let n = n_train + n_test;
    if n == 0 {
        return Err(Error::Data("no CIFAR-10 records".into()));
    }
    let data = train
        .pixels
        .iter()
        .chain(&test.pixels)
        .map(|&p| f64::from(p) / 255.0)
        .collect();
    LabeledDataset::new(
        Tensor::from_vec(&[n, 3, 32, 32], data)?,
        train
            .labels
            .iter()
            .chain(&test.labels)
            .map(|&l| usize::from(l))
            .collect(),
        CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect(),
        (0..n_train).collect(),
        (n_train..n).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::Task;

    fn batch(n: usize, seed: usize) -> CifarBatch {
        CifarBatch {
            labels: (0..n).map(|i| ((i + seed) % 10) as u8).collect(),
            pixels: (0..n * 3072)
                .map(|i| ((i * 13 + seed) % 256) as u8)
                .collect(),
        }
    }

    #[test]
    fn record_arithmetic_and_round_trip() {
        let b = batch(10, 1);
        let bytes = encode_cifar_batch(&b);
        assert_eq!(bytes.len(), 10 * 3073);
        assert_eq!(parse_cifar_batch(&bytes, "b").unwrap(), b);
    }

    #[test]
    fn rejects_partial_records_and_bad_labels() {
        let mut bytes = encode_cifar_batch(&batch(2, 0));
        bytes.push(0);
        match parse_cifar_batch(&bytes, "b") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 2 * 3073),
            other => panic!("{other:?}"),
        }
        let mut bytes = encode_cifar_batch(&batch(2, 0));
        bytes[3073] = 10;
        assert!(matches!(
            parse_cifar_batch(&bytes, "b"),
            Err(Error::Parse { offset: 3073, .. })
        ));
    }

    #[test]
    fn loads_planar_channels() {
        let dir = tempfile::tempdir().unwrap();
        let (train, test) = (dir.path().join("a.bin"), dir.path().join("t.bin"));
        let mut b = batch(3, 2);
        b.pixels[1024] = 255; // first green pixel of record 0
        std::fs::write(&train, encode_cifar_batch(&b)).unwrap();
        std::fs::write(&test, encode_cifar_batch(&batch(1, 5))).unwrap();
        let d = load_cifar10(&[train], &[test]).unwrap();
        assert_eq!(d.features().dims(), &[4, 3, 32, 32]);
        assert_eq!(d.features().get(&[0, 1, 0, 0]), Some(1.0));
        assert_eq!(d.train_indices().len(), 3);
        assert_eq!(d.test_indices(), &[3]);
        assert_eq!(d.label(3), 5);
    }
}
