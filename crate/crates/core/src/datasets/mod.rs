//! Labelled datasets, train/test partitions, and one-vs-all binary views.

pub mod cifar;
pub mod mnist;
pub mod synthetic;

use std::sync::Arc;

use rand::seq::{index, SliceRandom};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub use cifar::{load_cifar10, CIFAR10_CLASSES};
pub use mnist::{load_mnist, MnistFiles};
pub use synthetic::{generate_synthetic, SyntheticSpec};

/// Anything a network can be trained and evaluated on: a feature tensor
/// `[N, ...]`, integer labels and a train/test partition of `0..N`.
pub trait Task {
    fn features(&self) -> &Tensor;
    fn label(&self, index: usize) -> usize;
    fn class_count(&self) -> usize;
    fn train_indices(&self) -> &[usize];
    fn test_indices(&self) -> &[usize];

    fn sample_dims(&self) -> &[usize] {
        &self.features().dims()[1..]
    }

    /// Copies the given samples into a `[len, ...]` batch.
    fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        gather_rows(self.features(), indices)
    }
}

pub(crate) fn gather_rows(features: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let row = features.len() / features.dims()[0];
    let src = features.data();
    let mut data = Vec::with_capacity(indices.len() * row);
    for &i in indices {
        data.extend_from_slice(&src[i * row..(i + 1) * row]);
    }
    let mut dims = features.dims().to_vec();
    dims[0] = indices.len();
    Tensor::from_vec(&dims, data)
}

/// Features, labels and a disjoint, exhaustive train/test split. Cloning is
/// cheap: storage is shared.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    features: Arc<Tensor>,
    labels: Arc<Vec<usize>>,
    class_count: usize,
    class_names: Arc<Vec<String>>,
    train: Arc<Vec<usize>>,
    test: Arc<Vec<usize>>,
}

impl LabeledDataset {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        class_names: Vec<String>,
        train: Vec<usize>,
        test: Vec<usize>,
    ) -> Result<Self> {
        let n = features.dims()[0];
        let class_count = class_names.len();
        if labels.len() != n {
            return Err(Error::Data(format!(
                "{} labels for {n} samples",
                labels.len()
            )));
        }
        if class_count < 2 {
            return Err(Error::Data("a dataset needs at least two classes".into()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Data(format!(
                "label {bad} outside [0, {class_count})"
            )));
        }
        let mut seen = vec![false; n];
        for &i in train.iter().chain(&test) {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Data(format!(
                    "split index {i} out of range or repeated"
                )));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Data(
                "train/test split does not cover every sample".into(),
            ));
        }
        Ok(LabeledDataset {
            features: Arc::new(features),
            labels: Arc::new(labels),
            class_count,
            class_names: Arc::new(class_names),
            train: Arc::new(train),
            test: Arc::new(test),
        })
    }

    /// Builds a dataset and attaches a class-stratified split with
    /// `train_fraction` of each class in the training portion.
    pub fn with_stratified_split(
        features: Tensor,
        labels: Vec<usize>,
        class_names: Vec<String>,
        train_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        let (train, test) = stratified_split(&labels, class_names.len(), train_fraction, seed);
        LabeledDataset::new(features, labels, class_names, train, test)
    }

    pub fn features_arc(&self) -> &Arc<Tensor> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Same test split; the training split is reduced to `n`
    /// samples keeping each class's share (largest-remainder rounding) and
    /// taking the earliest training samples of each class. The result owns
    /// a compacted copy of the kept samples.
    pub fn with_train_subset(&self, n: usize) -> Result<Self> {
        if n >= self.train.len() {
            return Ok(self.clone());
        }
        if n == 0 {
            return Err(Error::Config("subset size must be >= 1".into()));
        }
        let total = self.train.len();
        let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); self.class_count];
        for &i in self.train.iter() {
            per_class[self.labels[i]].push(i);
        }
        let mut quota: Vec<usize> = per_class.iter().map(|c| c.len() * n / total).collect();
        let mut order: Vec<usize> = (0..self.class_count).collect();
        // largest remainder first, ties by class index
        order.sort_by_key(|&c| std::cmp::Reverse((per_class[c].len() * n) % total));
        let mut missing = n - quota.iter().sum::<usize>();
        for &c in order.iter().cycle() {
            if missing == 0 {
                break;
            }
            if quota[c] < per_class[c].len() {
                quota[c] += 1;
                missing -= 1;
            }
        }
        let mut keep: Vec<usize> = per_class
            .iter()
            .zip(&quota)
            .flat_map(|(idx, &q)| idx[..q].iter().copied())
            .collect();
        keep.sort_unstable();
        self.restricted(keep, self.test.to_vec())
    }

    /// Copies the listed samples into a fresh dataset, train first.
    fn restricted(&self, train: Vec<usize>, test: Vec<usize>) -> Result<Self> {
        let all: Vec<usize> = train.iter().chain(&test).copied().collect();
        let features = gather_rows(&self.features, &all)?;
        let labels = all.iter().map(|&i| self.labels[i]).collect();
        let n_train = train.len();
        LabeledDataset::new(
            features,
            labels,
            self.class_names.to_vec(),
            (0..n_train).collect(),
            (n_train..all.len()).collect(),
        )
    }

    pub fn class_counts(&self, indices: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &i in indices {
            counts[self.labels[i]] += 1;
        }
        counts
    }
}

impl Task for LabeledDataset {
    fn features(&self) -> &Tensor {
        &self.features
    }

    fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    fn class_count(&self) -> usize {
        self.class_count
    }

    fn train_indices(&self) -> &[usize] {
        &self.train
    }

    fn test_indices(&self) -> &[usize] {
        &self.test
    }
}

/// Per-class shuffle then `round(fraction * class_size)` samples of each
/// class go to training. Both index lists come back sorted.
pub fn stratified_split(
    labels: &[usize],
    class_count: usize,
    train_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut rng = rng::rng(seed);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for (i, &l) in labels.iter().enumerate() {
        per_class[l].push(i);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for mut idx in per_class {
        idx.shuffle(&mut rng);
        let k = (idx.len() as f64 * train_fraction).round() as usize;
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// One-vs-all relabelling of a source dataset: `target_class -> 1`,
/// everything else `-> 0`. The training portion is class-balanced; the test
/// portion is the source's full test split.
#[derive(Debug, Clone)]
pub struct BinaryTaskView {
    source: LabeledDataset,
    target_class: usize,
    train: Vec<usize>,
}

impl BinaryTaskView {
    pub fn source(&self) -> &LabeledDataset {
        &self.source
    }

    pub fn target_class(&self) -> usize {
        self.target_class
    }

    /// Every sample (train and test) of the target class.
    pub fn positive_indices(&self) -> Vec<usize> {
        (0..self.source.len())
            .filter(|&i| self.source.labels[i] == self.target_class)
            .collect()
    }

    /// `(positives, negatives)` in the balanced training portion.
    pub fn train_balance(&self) -> (usize, usize) {
        let pos = self.train.iter().filter(|&&i| self.label(i) == 1).count();
        (pos, self.train.len() - pos)
    }
}

impl Task for BinaryTaskView {
    fn features(&self) -> &Tensor {
        &self.source.features
    }

    fn label(&self, index: usize) -> usize {
        usize::from(self.source.labels[index] == self.target_class)
    }

    fn class_count(&self) -> usize {
        2
    }

    fn train_indices(&self) -> &[usize] {
        &self.train
    }

    fn test_indices(&self) -> &[usize] {
        &self.source.test
    }
}

/// Builds the `k` one-vs-all views. Training negatives are undersampled
/// uniformly without replacement to the positive count; if a class
/// outnumbers the rest combined its positives are undersampled instead.
pub fn make_ova_views(
    data: &LabeledDataset,
    k: usize,
    balance_seed: u64,
) -> Result<Vec<BinaryTaskView>> {
    if k != data.class_count {
        return Err(Error::Config(format!(
            "asked for {k} views of a {}-class dataset",
            data.class_count
        )));
    }
    let counts = data.class_counts(&data.train);
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!(
            "class {empty} has no training samples"
        )));
    }
    (0..k)
        .map(|target| {
            let (pos, neg): (Vec<usize>, Vec<usize>) =
                data.train.iter().partition(|&&i| data.labels[i] == target);
            let mut rng = rng::rng(rng::derive(balance_seed, target as u64));
            let keep = pos.len().min(neg.len());
            let pick = |pool: &[usize], rng: &mut rng::Rng| -> Vec<usize> {
                if pool.len() == keep {
                    pool.to_vec()
                } else {
                    index::sample(rng, pool.len(), keep)
                        .into_iter()
                        .map(|j| pool[j])
                        .collect()
                }
            };
            let pos = pick(&pos, &mut rng);
            let neg = pick(&neg, &mut rng);
            let mut train: Vec<usize> = pos.into_iter().chain(neg).collect();
            train.sort_unstable();
            Ok(BinaryTaskView {
                source: data.clone(),
                target_class: target,
                train,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, k: usize) -> LabeledDataset {
        let features = Tensor::from_vec(&[n, 1], (0..n).map(|i| i as f64).collect()).unwrap();
        let labels = (0..n).map(|i| (i * 7 + i / 3) % k).collect();
        let names = (0..k).map(|c| c.to_string()).collect();
        LabeledDataset::with_stratified_split(features, labels, names, 0.8, 3).unwrap()
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_stratified() {
        let d = toy(500, 5);
        let tr = d.class_counts(d.train_indices());
        let te = d.class_counts(d.test_indices());
        for (a, b) in tr.iter().zip(&te) {
            assert_eq!(*a, ((a + b) as f64 * 0.8).round() as usize);
        }
        assert_eq!(d.train_indices().len() + d.test_indices().len(), 500);
    }

    #[test]
    fn rejects_bad_labels_and_splits() {
        let f = Tensor::from_vec(&[3, 1], vec![0.0; 3]).unwrap();
        let names = vec!["a".to_string(), "b".to_string()];
        assert!(
            LabeledDataset::new(f.clone(), vec![0, 1, 2], names.clone(), vec![0, 1], vec![2])
                .is_err()
        );
        assert!(LabeledDataset::new(
            f.clone(),
            vec![0, 1, 1],
            names.clone(),
            vec![0, 1],
            vec![1, 2]
        )
        .is_err());
        assert!(LabeledDataset::new(f, vec![0, 1, 1], names, vec![0], vec![2]).is_err());
    }

    #[test]
    fn relabel_is_exhaustively_correct_on_toy_set() {
        let d = toy(30, 3);
        let views = make_ova_views(&d, 3, 1).unwrap();
        for v in &views {
            for i in 0..30 {
                let want = usize::from(d.labels()[i] == v.target_class());
                assert_eq!(v.label(i), want);
            }
        }
    }

    #[test]
    fn views_are_balanced_and_partition_positives() {
        let d = toy(400, 4);
        let views = make_ova_views(&d, 4, 9).unwrap();
        let mut union: Vec<usize> = Vec::new();
        for v in &views {
            let (p, n) = v.train_balance();
            assert_eq!(p, n);
            assert_eq!(p, d.class_counts(d.train_indices())[v.target_class()]);
            assert_eq!(v.test_indices(), d.test_indices());
            // no duplicates, never crosses into test
            let mut t = v.train_indices().to_vec();
            t.dedup();
            assert_eq!(t.len(), v.train_indices().len());
            assert!(t.iter().all(|i| d.train_indices().binary_search(i).is_ok()));
            assert!(Arc::ptr_eq(v.source().features_arc(), d.features_arc()));
            union.extend(v.positive_indices());
        }
        union.sort_unstable();
        assert_eq!(union, (0..400).collect::<Vec<_>>());
    }

    #[test]
    fn ova_errors() {
        let d = toy(40, 4);
        assert!(matches!(make_ova_views(&d, 3, 0), Err(Error::Config(_))));
        let f = Tensor::from_vec(&[4, 1], vec![0.0; 4]).unwrap();
        let names = vec!["a".into(), "b".into(), "c".into()];
        let d = LabeledDataset::new(f, vec![0, 1, 0, 1], names, vec![0, 1, 2, 3], vec![]).unwrap();
        assert!(matches!(make_ova_views(&d, 3, 0), Err(Error::Data(_))));
    }

    #[test]
    fn train_subset_keeps_class_shares() {
        let d = toy(1000, 10);
        let s = d.with_train_subset(200).unwrap();
        assert_eq!(s.train_indices().len(), 200);
        assert_eq!(s.test_indices().len(), d.test_indices().len());
        let full = d.class_counts(d.train_indices());
        for (c, &got) in s.class_counts(s.train_indices()).iter().enumerate() {
            let share = full[c] as f64 * 200.0 / d.train_indices().len() as f64;
            assert!(
                (got as f64 - share).abs() < 1.0,
                "class {c}: {got} vs {share}"
            );
        }
        // test samples carry the same features after re-indexing
        let first_test = d.test_indices()[0];
        assert_eq!(
            s.gather(&[s.test_indices()[0]]).unwrap().data(),
            d.gather(&[first_test]).unwrap().data()
        );
    }
}
