//! CTNet: a cross-transformer image denoising network on a small
//! reverse-mode autodiff engine, with its data pipeline, training loop and
//! evaluation metrics.

pub mod arch;
pub mod data;
pub mod error;
pub mod metrics;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
