//! Deterministic CPU engine for merged networks: layer kernels, DAG
//! execution with backpropagation, Nesterov momentum, finite-difference
//! gradient checking and checkpoints.

pub mod checkpoint;
pub mod exec;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tensor;

use thiserror::Error;

pub use exec::{run_backward, run_chain, run_forward, ForwardCache};
pub use gradcheck::{grad_check, grad_check_against, GradCheckOptions, GradCheckReport, NodeCheck};
pub use ops::Mode;
pub use optim::nesterov_update;
pub use params::{Gradients, ParamKind, ParamTensor, ParameterStore};
pub use tensor::{Real, Tensor};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("expected {expected} input channels, found {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("batch norm needs at least 2 values per channel in train mode, got {count}")]
    DegenerateBatch { count: usize },
    #[error("non-finite {what} at node {node}")]
    NonFinite { node: String, what: &'static str },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint does not match network at {node}: {reason}")]
    Mismatch { node: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
