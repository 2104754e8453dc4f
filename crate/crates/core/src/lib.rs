//! A small CNN framework with reverse-mode autograd, an improved ResNet34
//! (multi-scale input stem, Inception-v2 downsampling, squeeze-and-excitation
//! channel attention), and the data/metrics/training harness around it.

pub mod autograd;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use params::{Mode, ParamStore, Session};
pub use tensor::{DType, Scalar, Tensor};
