//! Learning mathematics of the participant cycle: the toy dataset, local
//! SGD with L2 regularization, FedAvg aggregation and evaluation.

mod dataset;
mod eval;
mod fedavg;
mod params;
mod train;

pub use dataset::{BlobSpec, Dataset};
pub use eval::{classification_scores, evaluate, predict, EvalReport};
pub use fedavg::aggregate_fedavg;
pub use params::{Activation, DenseLayer, Head, ModelArchitecture, ModelParams, SnapshotSidecar};
pub use train::{example_loss, forward, gradient, mean_loss, train_local, TrainConfig};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("structural error: {0}")]
    Structure(String),
    #[error("non-finite value in layer {layer}")]
    NonFinite { layer: usize },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
