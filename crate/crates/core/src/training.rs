//! Cross-entropy loss, the mini-batch SGD loop, evaluation metrics and
//! repeated-trial averaging.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{LabeledDataset, Task};
use crate::error::{Error, Result};
use crate::nn::{Activation, Network};
use crate::rng;
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` before taking
/// logs.
pub const PROB_FLOOR: f64 = 1e-15;

/// Sigmoid outputs strictly above this are positive.
pub const DECISION_THRESHOLD: f64 = 0.5;

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl TrainConfig {
    pub fn mlp_default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            batch_size: 32,
            epochs: 20,
            seed: 0,
            shuffle: true,
        }
    }

    pub fn cnn_default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 32,
            epochs: 5,
            seed: 0,
            shuffle: true,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        TrainConfig { seed, ..self }
    }

    pub fn validate(&self, train_len: usize) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Config(format!(
                "learning rate must be in (0, 1], got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.batch_size > train_len {
            return Err(Error::Config(format!(
                "batch size {} must be in 1..={train_len} (training-set size)",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Confusion {
    Binary {
        tp: u64,
        tn: u64,
        fp: u64,
        fn_: u64,
    },
    /// `matrix[true][predicted]`.
    Multi(Vec<Vec<u64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// Binary: TP / (TP + FN). Multi-class: macro-averaged per-class recall.
    pub sensitivity: f64,
    /// Binary: TN / (TN + FP). Multi-class: macro-averaged one-vs-rest TN rate.
    pub specificity: f64,
    pub confusion: Confusion,
    /// Mean training loss of each epoch.
    pub loss_curve: Vec<f64>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    pub fn from_binary(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        MetricsReport {
            accuracy: ratio(tp + tn, tp + tn + fp + fn_),
            sensitivity: ratio(tp, tp + fn_),
            specificity: ratio(tn, tn + fp),
            confusion: Confusion::Binary { tp, tn, fp, fn_ },
            loss_curve: Vec::new(),
        }
    }

    pub fn from_matrix(matrix: Vec<Vec<u64>>) -> Self {
        let k = matrix.len();
        let total: u64 = matrix.iter().flatten().sum();
        let trace: u64 = (0..k).map(|i| matrix[i][i]).sum();
        let mut sens = 0.0;
        let mut spec = 0.0;
        for c in 0..k {
            let tp = matrix[c][c];
            let actual: u64 = matrix[c].iter().sum();
            let predicted: u64 = matrix.iter().map(|r| r[c]).sum();
            let tn = total + tp - actual - predicted;
            sens += ratio(tp, actual);
            spec += ratio(tn, total - actual);
        }
        MetricsReport {
            accuracy: ratio(trace, total),
            sensitivity: sens / k as f64,
            specificity: spec / k as f64,
            confusion: Confusion::Multi(matrix),
            loss_curve: Vec::new(),
        }
    }
}

/// Mean negative log-likelihood of `labels` under `probs`, and its gradient
/// with respect to the head logits (`(p - y) / N`, valid for both the
/// sigmoid `[N, 1]` and softmax `[N, K]` heads).
pub fn cross_entropy_loss(probs: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let &[n, k] = probs.dims() else {
        return Err(Error::Shape(format!(
            "expected [N, K] probabilities, got {:?}",
            probs.dims()
        )));
    };
    if labels.len() != n {
        return Err(Error::dim("cross entropy labels", &[labels.len()], &[n]));
    }
    let classes = if k == 1 { 2 } else { k };
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let p = probs.data();
    let mut grad = p.to_vec();
    let mut total = 0.0;
    let scale = 1.0 / n as f64;
    for (i, &y) in labels.iter().enumerate() {
        let q = if k == 1 {
            if y == 1 {
                p[i]
            } else {
                1.0 - p[i]
            }
        } else {
            p[i * k + y]
        };
        total -= q.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR).ln();
        if k == 1 {
            grad[i] -= y as f64;
        } else {
            grad[i * k + y] -= 1.0;
        }
    }
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((total * scale, Tensor::new(probs.shape().clone(), grad)?))
}

/// `params -= lr * grads`, then clears the gradients.
pub fn sgd_step(net: &mut Network, learning_rate: f64) -> Result<()> {
    net.sgd_step(learning_rate)
}

fn check_head(net: &Network, task: &impl Task) -> Result<()> {
    let units = net.output_units();
    let ok = match net.head() {
        Activation::Sigmoid => units == 1 && task.class_count() == 2,
        Activation::Softmax => units == task.class_count(),
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "network head ({:?}, {units} units) does not fit a {}-class task",
            net.head(),
            task.class_count()
        )))
    }
}

/// Network outputs for `indices`, evaluated in chunks.
pub fn predict_proba(net: &Network, task: &impl Task, indices: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(indices.len() * net.output_units());
    for chunk in indices.chunks(EVAL_CHUNK) {
        out.extend_from_slice(net.forward(&task.gather(chunk)?)?.data());
    }
    Ok(out)
}

/// Decision rule shared by all reports: sigmoid > 0.5, or the first maximal
/// softmax entry.
pub fn decide(row: &[f64]) -> usize {
    if row.len() == 1 {
        usize::from(row[0] > DECISION_THRESHOLD)
    } else {
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best
    }
}

pub fn evaluate(net: &Network, task: &impl Task, indices: &[usize]) -> Result<MetricsReport> {
    check_head(net, task)?;
    let probs = predict_proba(net, task, indices)?;
    let width = net.output_units();
    if width == 1 {
        let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
        for (&i, row) in indices.iter().zip(probs.chunks(width)) {
            match (task.label(i), decide(row)) {
                (1, 1) => tp += 1,
                (0, 0) => tn += 1,
                (0, 1) => fp += 1,
                _ => fn_ += 1,
            }
        }
        Ok(MetricsReport::from_binary(tp, tn, fp, fn_))
    } else {
        let mut m = vec![vec![0u64; width]; width];
        for (&i, row) in indices.iter().zip(probs.chunks(width)) {
            m[task.label(i)][decide(row)] += 1;
        }
        Ok(MetricsReport::from_matrix(m))
    }
}

/// Plain mini-batch SGD over the task's training split; the returned report
/// is computed on the test split. Deterministic in `(spec seed, cfg.seed)`.
pub fn train(
    mut net: Network,
    task: &impl Task,
    cfg: &TrainConfig,
) -> Result<(Network, MetricsReport)> {
    check_head(&net, task)?;
    cfg.validate(task.train_indices().len())?;
    let mut order = task.train_indices().to_vec();
    let mut shuffle_rng = rng::rng(rng::derive(cfg.seed, 0x5EED));
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut labels = Vec::with_capacity(cfg.batch_size);
    net.zero_grad();
    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut shuffle_rng);
        }
        let mut epoch_loss = 0.0;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let diverged = || Error::Divergence { epoch, batch };
            let x = task.gather(chunk)?;
            labels.clear();
            labels.extend(chunk.iter().map(|&i| task.label(i)));
            let probs = net.forward_train(&x).map_err(|e| match e {
                Error::NonFinite(_) => diverged(),
                other => other,
            })?;
            let (loss, grad) = cross_entropy_loss(&probs, &labels)?;
            if !loss.is_finite() {
                return Err(diverged());
            }
            net.backward(&grad).map_err(|e| match e {
                Error::NonFinite(_) => diverged(),
                other => other,
            })?;
            net.sgd_step(cfg.learning_rate).map_err(|_| diverged())?;
            epoch_loss += loss * chunk.len() as f64;
        }
        loss_curve.push(epoch_loss / order.len() as f64);
    }
    let mut report = evaluate(&net, task, task.test_indices())?;
    report.loss_curve = loss_curve;
    Ok((net, report))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

impl MetricSet {
    pub fn of(r: &MetricsReport) -> Self {
        MetricSet {
            accuracy: r.accuracy,
            sensitivity: r.sensitivity,
            specificity: r.specificity,
        }
    }

    pub fn named(&self) -> [(&'static str, f64); 3] {
        [
            ("accuracy", self.accuracy),
            ("sensitivity", self.sensitivity),
            ("specificity", self.specificity),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub seed: u64,
    /// `None` when the trial diverged.
    pub metrics: Option<MetricSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trials: Vec<TrialOutcome>,
    /// Successful trials.
    pub n: usize,
    pub divergences: usize,
    pub mean: MetricSet,
    /// Sample standard deviation (n - 1 denominator).
    pub std: MetricSet,
}

/// `n` independent trial seeds under `base`.
pub fn trial_seeds(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|t| rng::derive(base, t)).collect()
}

/// Runs one trial per seed (fresh data draw, fresh initialisation, training
/// shuffle all keyed by that seed) and reduces the metrics in seed order.
/// Diverged trials are counted and excluded from the statistics.
pub fn repeat_trials<B, D>(
    build: B,
    data: D,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<TrialSummary>
where
    B: Fn(u64) -> Result<Network> + Sync,
    D: Fn(u64) -> Result<LabeledDataset> + Sync,
{
    if seeds.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 trials, got {}",
            seeds.len()
        )));
    }
    summarize(run_trials(build, data, cfg, seeds)?)
}

/// The per-seed outcomes behind [`repeat_trials`], in seed order.
pub fn run_trials<B, D>(
    build: B,
    data: D,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<TrialOutcome>>
where
    B: Fn(u64) -> Result<Network> + Sync,
    D: Fn(u64) -> Result<LabeledDataset> + Sync,
{
    seeds
        .par_iter()
        .map(|&seed| {
            let dataset = data(seed)?;
            let net = build(seed)?;
            match train(net, &dataset, &cfg.with_seed(seed)) {
                Ok((_, report)) => Ok(TrialOutcome {
                    seed,
                    metrics: Some(MetricSet::of(&report)),
                }),
                Err(e) if e.is_divergence() => Ok(TrialOutcome {
                    seed,
                    metrics: None,
                }),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Mean and sample standard deviation over the non-diverged trials, reduced
/// in the given order.
pub fn summarize(trials: Vec<TrialOutcome>) -> Result<TrialSummary> {
    let ok: Vec<MetricSet> = trials.iter().filter_map(|t| t.metrics).collect();
    if ok.is_empty() {
        return Err(Error::Data("every trial diverged".into()));
    }
    let n = ok.len() as f64;
    let stat = |f: fn(&MetricSet) -> f64| {
        let mean = ok.iter().map(f).sum::<f64>() / n;
        let var = if ok.len() > 1 {
            ok.iter().map(|m| (f(m) - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        (mean, var.sqrt())
    };
    let (am, asd) = stat(|m| m.accuracy);
    let (sm, ssd) = stat(|m| m.sensitivity);
    let (pm, psd) = stat(|m| m.specificity);
    Ok(TrialSummary {
        divergences: trials.len() - ok.len(),
        trials,
        n: ok.len(),
        mean: MetricSet {
            accuracy: am,
            sensitivity: sm,
            specificity: pm,
        },
        std: MetricSet {
            accuracy: asd,
            sensitivity: ssd,
            specificity: psd,
        },
    })
}
