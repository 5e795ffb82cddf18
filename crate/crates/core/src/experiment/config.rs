use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    SyntheticSweep,
    LayerSizeSweep,
    OvaBinary,
    OvaEnsemble,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 4] = [
        ExperimentKind::SyntheticSweep,
        ExperimentKind::LayerSizeSweep,
        ExperimentKind::OvaBinary,
        ExperimentKind::OvaEnsemble,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::SyntheticSweep => "synthetic-sweep",
            ExperimentKind::LayerSizeSweep => "layer-size-sweep",
            ExperimentKind::OvaBinary => "ova-binary",
            ExperimentKind::OvaEnsemble => "ova-ensemble",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// The 3-D Gaussian grid: one dataset per (std, size) pair.
    Synthetic {
        #[serde(default = "default_stds")]
        stds: Vec<f64>,
        #[serde(default = "default_sizes")]
        sizes: Vec<usize>,
        #[serde(default = "default_bias")]
        bias: f64,
    },
    Mnist {
        #[serde(default = "default_mnist_dir")]
        dir: PathBuf,
        /// Train on the first `subset` stratified training samples.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        subset: Option<usize>,
    },
    Cifar10 {
        #[serde(default = "default_cifar_dir")]
        dir: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        subset: Option<usize>,
    },
}

fn default_stds() -> Vec<f64> {
    vec![0.1, 0.5, 1.0]
}

fn default_sizes() -> Vec<usize> {
    vec![1_000, 10_000, 100_000]
}

fn default_bias() -> f64 {
    0.5
}

fn default_mnist_dir() -> PathBuf {
    PathBuf::from("data/mnist")
}

fn default_cifar_dir() -> PathBuf {
    PathBuf::from("data/cifar-10-batches-bin")
}

impl DatasetConfig {
    pub fn named(name: &str) -> Result<Self> {
        match name {
            "synthetic" => Ok(DatasetConfig::Synthetic {
                stds: default_stds(),
                sizes: default_sizes(),
                bias: default_bias(),
            }),
            "mnist" => Ok(DatasetConfig::Mnist {
                dir: default_mnist_dir(),
                subset: None,
            }),
            "cifar10" => Ok(DatasetConfig::Cifar10 {
                dir: default_cifar_dir(),
                subset: None,
            }),
            other => Err(Error::Config(format!(
                "unknown dataset `{other}` (expected synthetic, mnist or cifar10)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetConfig::Synthetic { .. } => "synthetic",
            DatasetConfig::Mnist { .. } => "mnist",
            DatasetConfig::Cifar10 { .. } => "cifar10",
        }
    }
}

/// Unset fields take the defaults of the experiment kind: the MLP budget
/// for the synthetic sweep, the CNN budget otherwise.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shuffle: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub dataset: DatasetConfig,
    /// Hidden widths to run. Empty means the kind's default list.
    #[serde(default)]
    pub hidden: Vec<usize>,
    /// Trials per synthetic cell.
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Worker threads; 0 uses every core.
    #[serde(default)]
    pub jobs: usize,
    #[serde(default)]
    pub train: TrainSection,
    /// Widths of the single multi-class networks an ensemble is compared
    /// against; unset means the ensemble's own widths, `[]` none.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare_hidden: Option<Vec<usize>>,
}

fn default_trials() -> usize {
    100
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

/// Command-line overrides; `None` keeps the file value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub experiment: Option<ExperimentKind>,
    pub dataset: Option<String>,
    pub hidden: Option<Vec<usize>>,
    pub trials: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub subset: Option<usize>,
    pub jobs: Option<usize>,
}

impl ExperimentConfig {
    /// Defaults for `kind` on its natural dataset.
    pub fn for_kind(kind: ExperimentKind) -> Self {
        let dataset = match kind {
            ExperimentKind::SyntheticSweep => "synthetic",
            _ => "mnist",
        };
        ExperimentConfig {
            experiment: kind,
            dataset: DatasetConfig::named(dataset).expect("known dataset"),
            hidden: Vec::new(),
            trials: default_trials(),
            seed: 0,
            out: default_out(),
            jobs: 0,
            train: TrainSection::default(),
            compare_hidden: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(kind) = o.experiment {
            self.experiment = kind;
        }
        if let Some(name) = &o.dataset {
            if name != self.dataset.name() {
                self.dataset = DatasetConfig::named(name)?;
            }
        }
        if let Some(h) = &o.hidden {
            self.hidden = h.clone();
        }
        if let Some(subset) = o.subset {
            match &mut self.dataset {
                DatasetConfig::Mnist { subset: s, .. }
                | DatasetConfig::Cifar10 { subset: s, .. } => *s = Some(subset),
                DatasetConfig::Synthetic { .. } => {
                    return Err(Error::Config(
                        "--subset applies to mnist and cifar10 only".into(),
                    ))
                }
            }
        }
        macro_rules! set {
            ($($src:ident => $dst:expr),*) => {$( if let Some(v) = o.$src.clone() { $dst = v; } )*};
        }
        set!(trials => self.trials, seed => self.seed, out => self.out, jobs => self.jobs);
        if let Some(e) = o.epochs {
            self.train.epochs = Some(e);
        }
        if let Some(lr) = o.learning_rate {
            self.train.learning_rate = Some(lr);
        }
        if let Some(b) = o.batch_size {
            self.train.batch_size = Some(b);
        }
        Ok(())
    }

    /// Fills every kind-dependent default and validates. The result is what
    /// a run manifest records, so replays never depend on default values.
    pub fn resolved(mut self) -> Result<Self> {
        use ExperimentKind::*;
        if self.hidden.is_empty() {
            self.hidden = match self.experiment {
                SyntheticSweep => vec![1, 10, 100],
                LayerSizeSweep => (0..=10).map(|p| 1 << p).collect(),
                OvaBinary | OvaEnsemble => vec![1],
            };
        }
        if self.experiment == OvaEnsemble && self.compare_hidden.is_none() {
            self.compare_hidden = Some(self.hidden.clone());
        }
        let base = match self.experiment {
            SyntheticSweep => TrainConfig::mlp_default(),
            _ => TrainConfig::cnn_default(),
        };
        let t = &mut self.train;
        t.learning_rate.get_or_insert(base.learning_rate);
        t.batch_size.get_or_insert(base.batch_size);
        t.epochs.get_or_insert(base.epochs);
        t.shuffle.get_or_insert(base.shuffle);
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self
            .hidden
            .iter()
            .chain(self.compare_hidden.iter().flatten())
            .any(|&h| h == 0)
        {
            return bad("hidden widths must be >= 1".into());
        }
        match (self.experiment, &self.dataset) {
            (ExperimentKind::SyntheticSweep, DatasetConfig::Synthetic { .. }) => {}
            (ExperimentKind::SyntheticSweep, d) => {
                return bad(format!(
                    "synthetic-sweep needs the synthetic dataset, not {}",
                    d.name()
                ))
            }
            (ExperimentKind::LayerSizeSweep, DatasetConfig::Synthetic { .. }) => {
                return bad("layer-size-sweep needs mnist or cifar10".into())
            }
            _ => {}
        }
        if let DatasetConfig::Synthetic { stds, sizes, bias } = &self.dataset {
            if stds.is_empty() || sizes.is_empty() {
                return bad("synthetic stds and sizes must be non-empty".into());
            }
            if stds.iter().any(|s| !(s.is_finite() && *s > 0.0)) || !bias.is_finite() {
                return bad(format!(
                    "synthetic stds must be positive and finite, got {stds:?}"
                ));
            }
            if sizes.iter().any(|&n| n < 10) {
                return bad(format!("synthetic sizes must be >= 10, got {sizes:?}"));
            }
            if self.trials < 2 {
                return bad(format!("need at least 2 trials, got {}", self.trials));
            }
        }
        if let DatasetConfig::Mnist {
            subset: Some(0), ..
        }
        | DatasetConfig::Cifar10 {
            subset: Some(0), ..
        } = self.dataset
        {
            return bad("subset must be >= 1".into());
        }
        let cfg = self.train_config();
        if !(cfg.learning_rate > 0.0 && cfg.learning_rate <= 1.0) {
            return bad(format!(
                "learning rate must be in (0, 1], got {}",
                cfg.learning_rate
            ));
        }
        if cfg.batch_size == 0 || cfg.epochs == 0 {
            return bad("batch size and epochs must be >= 1".into());
        }
        Ok(())
    }

    /// Training settings; call on a resolved config.
    pub fn train_config(&self) -> TrainConfig {
        let d = TrainConfig::mlp_default();
        TrainConfig {
            learning_rate: self.train.learning_rate.unwrap_or(d.learning_rate),
            batch_size: self.train.batch_size.unwrap_or(d.batch_size),
            epochs: self.train.epochs.unwrap_or(d.epochs),
            seed: self.seed,
            shuffle: self.train.shuffle.unwrap_or(d.shuffle),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_resolves() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            experiment = "ova-ensemble"
            seed = 7
            [dataset]
            kind = "mnist"
            subset = 500
            [train]
            epochs = 2
            "#,
        )
        .unwrap()
        .resolved()
        .unwrap();
        assert_eq!(cfg.hidden, vec![1]);
        assert_eq!(cfg.compare_hidden, Some(vec![1]));
        let t = cfg.train_config();
        assert_eq!(
            (t.epochs, t.learning_rate, t.batch_size, t.seed),
            (2, 0.01, 32, 7)
        );
        assert_eq!(
            cfg.dataset,
            DatasetConfig::Mnist {
                dir: "data/mnist".into(),
                subset: Some(500)
            }
        );
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn sweep_defaults() {
        let s = ExperimentConfig::for_kind(ExperimentKind::SyntheticSweep)
            .resolved()
            .unwrap();
        assert_eq!(s.hidden, vec![1, 10, 100]);
        assert_eq!(s.train_config().epochs, 20);
        let l = ExperimentConfig::for_kind(ExperimentKind::LayerSizeSweep)
            .resolved()
            .unwrap();
        assert_eq!(l.hidden.len(), 11);
        assert_eq!(l.hidden.last(), Some(&1024));
    }

    #[test]
    fn overrides_win() {
        let mut cfg = ExperimentConfig::for_kind(ExperimentKind::OvaBinary);
        cfg.apply(&Overrides {
            dataset: Some("cifar10".into()),
            subset: Some(10_000),
            hidden: Some(vec![128]),
            learning_rate: Some(0.02),
            ..Overrides::default()
        })
        .unwrap();
        let cfg = cfg.resolved().unwrap();
        assert_eq!(cfg.dataset.name(), "cifar10");
        assert_eq!(cfg.hidden, vec![128]);
        assert_eq!(cfg.train_config().learning_rate, 0.02);
        let mut syn = ExperimentConfig::for_kind(ExperimentKind::SyntheticSweep);
        assert!(syn
            .apply(&Overrides {
                subset: Some(5),
                ..Overrides::default()
            })
            .is_err());
    }

    #[test]
    fn rejects_bad_configs() {
        let err = |s: &str| {
            ExperimentConfig::from_toml_str(s)
                .and_then(|c| c.resolved())
                .is_err()
        };
        assert!(err("experiment = \"nope\"\n[dataset]\nkind = \"mnist\""));
        assert!(err(
            "experiment = \"ova-binary\"\nhidden = [0]\n[dataset]\nkind = \"mnist\""
        ));
        assert!(err(
            "experiment = \"synthetic-sweep\"\n[dataset]\nkind = \"mnist\""
        ));
        assert!(err(
            "experiment = \"layer-size-sweep\"\n[dataset]\nkind = \"synthetic\""
        ));
        assert!(err(
            "experiment = \"ova-binary\"\ntypo = 1\n[dataset]\nkind = \"mnist\""
        ));
        assert!(err("experiment = \"ova-binary\"\n[dataset]\nkind = \"mnist\"\n[train]\nlearning_rate = 2.0"));
        assert!(err(
            "experiment = \"synthetic-sweep\"\ntrials = 1\n[dataset]\nkind = \"synthetic\""
        ));
    }
}
