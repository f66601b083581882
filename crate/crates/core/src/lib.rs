//! Multi-class segmentation of multi-modal 3-D volumes with supervoxel
//! region adjacency graphs and a multi-head graph attention network.
//!
//! Pipeline: [`volume`] normalization → [`supervoxel`] SLIC clustering →
//! [`graph`] construction → [`gat`] classification trained by
//! [`training`] → voxel-level [`metrics`].

pub mod error;
pub mod scalar;
pub mod stats;
pub mod tensor;
pub mod volume;
pub mod io;
pub mod supervoxel;
pub mod graph;
pub mod gat;
pub mod training;
pub mod metrics;
pub mod phantom;
pub mod overlay;
pub mod pipeline;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision tensor; the default for training and gradient checks.
pub type Tensor = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape = tensor::Tape<f64>;
pub type GatModel = gat::GatModel<f64>;
pub type GatModel32 = gat::GatModel<f32>;
pub type GatConvLayer = gat::GatConvLayer<f64>;
