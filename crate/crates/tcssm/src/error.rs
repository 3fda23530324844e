use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("all dimensions must be at least 1, got {0:?}")]
    InvalidDims([usize; 4]),
    #[error("{name}: expected {expected} elements, got {actual}")]
    Shape {
        name: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{name}[{index}] = {value} is not a positive step size")]
    NonPositiveDelta {
        name: &'static str,
        index: usize,
        value: f64,
    },
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("image is {height}x{width}; both sides must be positive multiples of 16")]
    ImageSize { height: usize, width: usize },
    #[error("{what}: expected {expected}, got {actual}")]
    Shape {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("gold index {index} outside vocabulary of {classes}")]
    GoldIndex { index: usize, classes: usize },
    #[error("loss diverged at epoch {epoch}, step {step}: {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("gradient check failed before training: {0}")]
    GradCheck(String),
    #[error("{0}")]
    Config(String),
}
