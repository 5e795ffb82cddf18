//! Two-class Gaussian point clouds: every coordinate is drawn from
//! `N(mean, std)`, then the first half of the draws is shifted by `+bias`
//! (class 1) and the second half by `-bias` (class 0).

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, Task};
use crate::error::{Error, Result};
use crate::rng::{self, Normal};
use crate::tensor::Tensor;

pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub mean: f64,
    pub std: f64,
    pub bias: f64,
    pub n_samples: usize,
    pub dim: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(std: f64, n_samples: usize, seed: u64) -> Self {
        SyntheticSpec {
            mean: 0.0,
            std,
            bias: 0.5,
            n_samples,
            dim: 3,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.std > 0.0 && self.std.is_finite()) {
            return Err(Error::Config(format!(
                "std must be positive, got {}",
                self.std
            )));
        }
        if self.n_samples < 2 || !self.n_samples.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "n_samples must be even and >= 2, got {}",
                self.n_samples
            )));
        }
        if self.dim == 0 {
            return Err(Error::Config("dim must be >= 1".into()));
        }
        Ok(())
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let (n, dim) = (spec.n_samples, spec.dim);
    let mut draw_rng = rng::rng(rng::derive(spec.seed, 0));
    let mut normal = Normal::new(spec.mean, spec.std);
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let (shift, label) = if i < n / 2 {
            (spec.bias, 1)
        } else {
            (-spec.bias, 0)
        };
        let x: Vec<f64> = (0..dim)
            .map(|_| normal.sample(&mut draw_rng) + shift)
            .collect();
        rows.push((x, label));
    }
    rows.shuffle(&mut rng::rng(rng::derive(spec.seed, 1)));
    let labels = rows.iter().map(|r| r.1).collect();
    let features = Tensor::from_vec(&[n, dim], rows.into_iter().flat_map(|r| r.0).collect())?;
    LabeledDataset::with_stratified_split(
        features,
        labels,
        vec!["negative".into(), "positive".into()],
        TRAIN_FRACTION,
        rng::derive(spec.seed, 2),
    )
}

/// `x0,x1,...,label` CSV, one row per sample in storage order.
pub fn write_csv(data: &LabeledDataset, path: &Path) -> Result<()> {
    let dims = data.features().dims();
    let dim = dims[1..].iter().product::<usize>();
    let mut out = String::new();
    let header: Vec<String> = (0..dim).map(|j| format!("x{j}")).collect();
    out.push_str(&header.join(","));
    out.push_str(",label\n");
    for (row, &label) in data.features().data().chunks(dim).zip(data.labels()) {
        for v in row {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{label}\n"));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class_moments(d: &LabeledDataset, class: usize, coord: usize) -> (f64, f64) {
        let xs: Vec<f64> = d
            .labels()
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| d.features().data()[i * 3 + coord])
            .collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        (mean, var.sqrt())
    }

    #[test]
    fn large_sample_moments_match_generative_model() {
        let d = generate_synthetic(&SyntheticSpec::new(1.0, 100_000, 17)).unwrap();
        for (class, want) in [(1, 0.5), (0, -0.5)] {
            for coord in 0..3 {
                let (m, s) = class_moments(&d, class, coord);
                assert!(
                    (m - want).abs() <= 0.02,
                    "class {class} coord {coord}: mean {m}"
                );
                assert!(
                    (s - 1.0).abs() <= 0.02,
                    "class {class} coord {coord}: std {s}"
                );
            }
        }
        assert_eq!(
            d.class_counts(&(0..d.len()).collect::<Vec<_>>()),
            vec![50_000, 50_000]
        );
        assert_eq!(d.train_indices().len(), 80_000);
    }

    #[test]
    fn zero_bias_classes_are_identically_distributed() {
        let mut spec = SyntheticSpec::new(1.0, 100_000, 4);
        spec.bias = 0.0;
        let d = generate_synthetic(&spec).unwrap();
        for coord in 0..3 {
            let (m1, s1) = class_moments(&d, 1, coord);
            let (m0, s0) = class_moments(&d, 0, coord);
            assert!((m1 - m0).abs() < 0.03 && (s1 - s0).abs() < 0.03);
        }
    }

    #[test]
    fn seeded_determinism() {
        let a = generate_synthetic(&SyntheticSpec::new(0.5, 1000, 8)).unwrap();
        let b = generate_synthetic(&SyntheticSpec::new(0.5, 1000, 8)).unwrap();
        let c = generate_synthetic(&SyntheticSpec::new(0.5, 1000, 9)).unwrap();
        assert_eq!(a.features().data(), b.features().data());
        assert_eq!(a.train_indices(), b.train_indices());
        assert_ne!(a.features().data(), c.features().data());
    }

    #[test]
    fn validation() {
        assert!(SyntheticSpec::new(0.0, 10, 0).validate().is_err());
        assert!(SyntheticSpec::new(1.0, 11, 0).validate().is_err());
    }

    #[test]
    fn csv_export() {
        let d = generate_synthetic(&SyntheticSpec::new(0.1, 4, 1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_csv(&d, &p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "x0,x1,x2,label");
        assert_eq!(lines.len(), 5);
        let first: Vec<f64> = lines[1].split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(&first[..3], &d.features().data()[..3]);
    }
}
