//! Spatial protein prediction from spatial RNA with a weight-tied graph
//! attention autoencoder.
//!
//! The numeric modules are generic over [`Scalar`] (`f32` or `f64`). The
//! aliases below fix the scalar to `f64`, which is what the command-line tool
//! and checkpoints use.

pub mod attention;
pub mod autoencoder;
pub mod checkpoint;
pub mod cluster;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod metrics;
pub mod optim;
pub mod preprocess;
pub mod scalar;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Model = autoencoder::ModelParams<f64>;
pub type GatLayer = attention::GatLayerParams<f64>;
pub type Pipeline = preprocess::PreprocessState<f64>;
pub type Processed = preprocess::ProcessedDataset<f64>;
pub type Checkpoint = checkpoint::Checkpoint<f64>;
pub type Gmm = cluster::GmmModel<f64>;
