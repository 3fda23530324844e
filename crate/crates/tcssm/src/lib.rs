//! Text-conditioned bi-temporal state space scan with analytic gradients,
//! plus a small end-to-end change-QA model built on it.

pub mod error;
pub mod kernel;
mod linalg;
pub mod nn;

pub use error::{KernelError, ModelError};
pub mod bench;
pub mod model;
pub mod task;
pub mod train;
