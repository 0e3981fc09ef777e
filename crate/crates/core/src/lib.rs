//! Message-passing graph neural networks (GCN, GIN, GatedGCN) with six
//! switchable enhancements: edge features, batch normalization, dropout,
//! residual connections, a feed-forward block, and random-walk structural
//! encoding. Ships its own reverse-mode autodiff, data pipeline, optimizer,
//! metrics and gradient checker.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`). The
//! aliases below pin it to `f64`, which training and verification use.

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod model;
pub mod params;
pub mod pe;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autodiff::{Mode, OpKind, Tape, Var};
pub use error::{Error, Result};
pub use graph::{Dataset, Graph, GraphBatch, Schema, Task};
pub use layers::{Backbone, TechniqueFlags};
pub use model::{ModelConfig, Readout};
pub use rng::RngState;
pub use scalar::Scalar;
pub use train::{MetricName, Metrics, Selection, TrainConfig};

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
pub type ParameterStore64 = params::ParameterStore<f64>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Var64<'t> = autodiff::Var<'t, f64>;
