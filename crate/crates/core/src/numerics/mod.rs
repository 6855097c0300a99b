//! Reverse-mode autodiff engine, optimizer and learning-rate schedule.

mod graph;
mod optim;
mod real;
mod rng;
mod schedule;
mod tensor;

pub use graph::{ConvGeometry, Graph, NodeId};
pub use optim::{LookaheadConfig, OptimizerState};
pub use real::Real;
pub use rng::SeedTree;
pub use schedule::LrSchedule;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("every position is masked out of the loss")]
    AllMasked,
    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("step {step} outside schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid optimizer setting: {0}")]
    InvalidOptimizer(String),
}
