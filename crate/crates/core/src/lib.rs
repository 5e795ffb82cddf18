//! Small-network experiments: a from-scratch `f64` CNN/MLP stack, dataset
//! loaders, one-vs-all ensembles of tiny binary networks, and the harness
//! that runs hidden-width sweeps over them.

pub mod datasets;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod ova;
pub mod rng;
pub mod tensor;
pub mod training;

pub use datasets::{BinaryTaskView, LabeledDataset, Task};
pub use error::{Error, Result};
pub use nn::{build_mlp, build_paper_cnn, Activation, LayerSpec, Network, NetworkSpec};
pub use ova::{AggregationPolicy, OvaEnsemble, Verdict};
pub use tensor::{Shape, Tensor};
pub use training::{MetricsReport, TrainConfig};
