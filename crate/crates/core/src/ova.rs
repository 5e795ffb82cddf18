//! One-vs-all ensembles: one binary network per class, combined by firing
//! every member on a sample and reading off the set of positive members.
//!
//! Under the default [`AggregationPolicy::RedundancyIsError`] a sample is
//! correct only when exactly one member fires and it is the member for the
//! true class. Two or more positives make the sample *redundant*, which
//! counts against accuracy.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{make_ova_views, LabeledDataset, Task};
use crate::error::{Error, Result};
use crate::nn::{checkpoint, Network, NetworkSpec};
use crate::rng;
use crate::tensor::Tensor;
use crate::training::{self, MetricsReport, TrainConfig, DECISION_THRESHOLD};

const EVAL_CHUNK: usize = 256;

/// A binary scorer producing one probability-like score per sample.
pub trait BinaryMember: Sync {
    fn scores(&self, batch: &Tensor) -> Result<Vec<f64>>;
}

impl BinaryMember for Network {
    fn scores(&self, batch: &Tensor) -> Result<Vec<f64>> {
        if self.output_units() != 1 {
            return Err(Error::Config(
                "ensemble members need a single sigmoid output".into(),
            ));
        }
        Ok(self.forward(batch)?.into_data())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationPolicy {
    /// Exactly one positive member, matching the label, is correct;
    /// several positives are redundant and count as errors.
    #[default]
    RedundancyIsError,
    /// The lowest-indexed positive member wins.
    PriorityEncoding,
    /// Highest raw score wins, threshold ignored. Diagnostic only.
    ArgmaxDiagnostic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Correct(usize),
    /// Two or more members fired.
    Redundant(Vec<usize>),
    NoPositive,
    /// A single (or policy-selected) prediction that is wrong.
    WrongSingle(usize),
}

impl Verdict {
    pub fn tag(&self) -> &'static str {
        match self {
            Verdict::Correct(_) => "correct",
            Verdict::Redundant(_) => "redundant",
            Verdict::NoPositive => "no-positive",
            Verdict::WrongSingle(_) => "wrong-single",
        }
    }
}

/// Positive members for one sample: score strictly above `threshold`.
pub fn positive_set(scores: &[f64], threshold: f64) -> Vec<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > threshold)
        .map(|(c, _)| c)
        .collect()
}

/// The aggregation rule. `positives` must be sorted ascending; `scores` is
/// only consulted by the argmax diagnostic.
pub fn verdict(
    positives: &[usize],
    scores: &[f64],
    label: usize,
    policy: AggregationPolicy,
) -> Verdict {
    let judge = |pred: usize| {
        if pred == label {
            Verdict::Correct(pred)
        } else {
            Verdict::WrongSingle(pred)
        }
    };
    match policy {
        AggregationPolicy::RedundancyIsError => match positives {
            [] => Verdict::NoPositive,
            [one] => judge(*one),
            many => Verdict::Redundant(many.to_vec()),
        },
        AggregationPolicy::PriorityEncoding => match positives.first() {
            None => Verdict::NoPositive,
            Some(&first) => judge(first),
        },
        AggregationPolicy::ArgmaxDiagnostic => {
            let best = scores
                .iter()
                .enumerate()
                .fold(0, |b, (i, &s)| if s > scores[b] { i } else { b });
            judge(best)
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictCounts {
    pub correct: u64,
    pub redundant: u64,
    pub no_positive: u64,
    pub wrong_single: u64,
}

impl VerdictCounts {
    pub fn total(&self) -> u64 {
        self.correct + self.redundant + self.no_positive + self.wrong_single
    }

    fn add(&mut self, v: &Verdict) {
        match v {
            Verdict::Correct(_) => self.correct += 1,
            Verdict::Redundant(_) => self.redundant += 1,
            Verdict::NoPositive => self.no_positive += 1,
            Verdict::WrongSingle(_) => self.wrong_single += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub index: usize,
    pub label: usize,
    pub positives: Vec<usize>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleOutcome {
    pub samples: Vec<SampleResult>,
    pub counts: VerdictCounts,
    pub max_positive: usize,
}

impl EnsembleOutcome {
    fn fraction(&self, n: u64) -> f64 {
        n as f64 / self.counts.total() as f64
    }

    pub fn correct(&self) -> f64 {
        self.fraction(self.counts.correct)
    }

    pub fn redundant(&self) -> f64 {
        self.fraction(self.counts.redundant)
    }

    /// No-positive plus wrong-single samples. With [`Self::correct`] and
    /// [`Self::redundant`] this partitions the evaluated set.
    pub fn remainder(&self) -> f64 {
        self.fraction(self.counts.no_positive + self.counts.wrong_single)
    }

    /// Everything that is not correct, redundancy included.
    pub fn misclassified(&self) -> f64 {
        self.fraction(self.counts.total() - self.counts.correct)
    }
}

/// Tallies verdicts for precomputed per-sample positive sets and scores.
pub fn aggregate(
    indices: &[usize],
    labels: &[usize],
    scores: &[Vec<f64>],
    threshold: f64,
    policy: AggregationPolicy,
) -> EnsembleOutcome {
    let mut counts = VerdictCounts::default();
    let mut max_positive = 0;
    let samples = indices
        .iter()
        .zip(labels)
        .zip(scores)
        .map(|((&index, &label), s)| {
            let positives = positive_set(s, threshold);
            let v = verdict(&positives, s, label, policy);
            counts.add(&v);
            max_positive = max_positive.max(positives.len());
            SampleResult {
                index,
                label,
                positives,
                verdict: v,
            }
        })
        .collect();
    EnsembleOutcome {
        samples,
        counts,
        max_positive,
    }
}

#[derive(Debug, Clone)]
pub struct OvaEnsemble<M = Network> {
    members: Vec<M>,
    pub threshold: f64,
    pub policy: AggregationPolicy,
    class_names: Vec<String>,
    seeds: Vec<u64>,
    /// Per-member binary metrics on the (unbalanced) test split.
    pub member_reports: Vec<MetricsReport>,
}

impl<M: BinaryMember> OvaEnsemble<M> {
    pub fn from_members(
        members: Vec<M>,
        class_names: Vec<String>,
        seeds: Vec<u64>,
    ) -> Result<Self> {
        if members.len() < 2 || members.len() != class_names.len() || seeds.len() != members.len() {
            return Err(Error::Config(format!(
                "{} members, {} classes, {} seeds: need one member and seed per class (>= 2)",
                members.len(),
                class_names.len(),
                seeds.len()
            )));
        }
        Ok(OvaEnsemble {
            members,
            threshold: DECISION_THRESHOLD,
            policy: AggregationPolicy::default(),
            class_names,
            seeds,
            member_reports: Vec::new(),
        })
    }

    pub fn members(&self) -> &[M] {
        &self.members
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    /// `scores[sample][class]` for a batch.
    pub fn scores(&self, batch: &Tensor) -> Result<Vec<Vec<f64>>> {
        let per_member: Vec<Vec<f64>> = self
            .members
            .par_iter()
            .map(|m| m.scores(batch))
            .collect::<Result<_>>()?;
        let n = batch.dims()[0];
        Ok((0..n)
            .map(|i| per_member.iter().map(|s| s[i]).collect())
            .collect())
    }

    /// Positive set of every sample in the batch.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<Vec<usize>>> {
        Ok(self
            .scores(batch)?
            .iter()
            .map(|s| positive_set(s, self.threshold))
            .collect())
    }

    /// Verdicts over the full test split of `data`.
    pub fn evaluate(&self, data: &impl Task) -> Result<EnsembleOutcome> {
        let indices = data.test_indices();
        if indices.is_empty() {
            return Err(Error::Data("empty test split".into()));
        }
        let mut scores = Vec::with_capacity(indices.len());
        for chunk in indices.chunks(EVAL_CHUNK) {
            scores.extend(self.scores(&data.gather(chunk)?)?);
        }
        let labels: Vec<usize> = indices.iter().map(|&i| data.label(i)).collect();
        Ok(aggregate(
            indices,
            &labels,
            &scores,
            self.threshold,
            self.policy,
        ))
    }
}

/// Binary member architecture for a dataset: the paper CNN over `[C, H, W]`
/// samples, an MLP over flat samples.
pub fn member_spec(sample_dims: &[usize], hidden_units: usize, seed: u64) -> Result<NetworkSpec> {
    match *sample_dims {
        [_, _, _] => NetworkSpec::paper_cnn(crate::Shape::new(sample_dims)?, hidden_units, 1, seed),
        [d] => NetworkSpec::mlp(d, hidden_units, seed),
        _ => Err(Error::Shape(format!(
            "no member architecture for samples of shape {sample_dims:?}"
        ))),
    }
}

/// Seed of the member for `class`.
pub fn member_seed(base_seed: u64, class: usize) -> u64 {
    base_seed ^ class as u64
}

/// Trains member `class` on its balanced view. Independent of every other
/// member.
pub fn train_member(
    data: &LabeledDataset,
    class: usize,
    hidden_units: usize,
    cfg: &TrainConfig,
) -> Result<(Network, MetricsReport)> {
    let views = make_ova_views(data, data.class_count(), balance_seed(cfg.seed))?;
    let seed = member_seed(cfg.seed, class);
    let net = Network::new(member_spec(data.sample_dims(), hidden_units, seed)?)?;
    training::train(net, &views[class], &cfg.with_seed(seed))
}

fn balance_seed(base: u64) -> u64 {
    rng::derive(base, 0xBA1A)
}

/// One member per class, trained in parallel on class-balanced views.
pub fn train_ensemble(
    data: &LabeledDataset,
    hidden_units: usize,
    cfg: &TrainConfig,
) -> Result<OvaEnsemble> {
    let k = data.class_count();
    let views = make_ova_views(data, k, balance_seed(cfg.seed))?;
    let trained: Vec<(Network, MetricsReport)> = views
        .par_iter()
        .enumerate()
        .map(|(class, view)| {
            let seed = member_seed(cfg.seed, class);
            Network::new(member_spec(data.sample_dims(), hidden_units, seed)?)
                .and_then(|net| training::train(net, view, &cfg.with_seed(seed)))
                .map_err(|e| Error::Member {
                    class,
                    source: Box::new(e),
                })
        })
        .collect::<Result<_>>()?;
    let seeds = (0..k).map(|c| member_seed(cfg.seed, c)).collect();
    let (members, reports): (Vec<_>, Vec<_>) = trained.into_iter().unzip();
    let mut ensemble = OvaEnsemble::from_members(members, data.class_names().to_vec(), seeds)?;
    ensemble.member_reports = reports;
    Ok(ensemble)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub classes: Vec<String>,
    pub threshold: f64,
    pub policy: AggregationPolicy,
    pub seeds: Vec<u64>,
    pub members: Vec<String>,
}

impl OvaEnsemble<Network> {
    /// Writes `member_XX.sens` checkpoints plus `ensemble.json`.
    pub fn save_dir(&self, dir: &Path) -> Result<Vec<String>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::new();
        for (i, m) in self.members.iter().enumerate() {
            let name = format!("member_{i:02}.sens");
            checkpoint::save(m, &dir.join(&name))?;
            files.push(name);
        }
        let manifest = EnsembleManifest {
            classes: self.class_names.clone(),
            threshold: self.threshold,
            policy: self.policy,
            seeds: self.seeds.clone(),
            members: files.clone(),
        };
        let path = dir.join("ensemble.json");
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        files.push("ensemble.json".into());
        Ok(files)
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let path = dir.join("ensemble.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: EnsembleManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let members = manifest
            .members
            .iter()
            .map(|f| checkpoint::load(&dir.join(f)))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = members.first() {
            if members
                .iter()
                .any(|m| m.input_shape() != first.input_shape())
            {
                return Err(Error::Checkpoint("members disagree on input shape".into()));
            }
        }
        let mut e = OvaEnsemble::from_members(members, manifest.classes, manifest.seeds)?;
        e.threshold = manifest.threshold;
        e.policy = manifest.policy;
        Ok(e)
    }
}
