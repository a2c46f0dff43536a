//! HyM-UNet: a hybrid convolution / selective state-space segmentation network
//! with its own reverse-mode autodiff, losses, metrics, data pipeline and
//! training loop, sized for desk-scale CPU experiments in `f64`.

pub mod bench;
pub mod blocks;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ss2d;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
