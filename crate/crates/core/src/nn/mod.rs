//! Minimal dense/convolutional network substrate: row-major `f32` tensors,
//! layer stacks with cached forward passes, reverse-mode gradients and plain SGD.

mod gradcheck;
mod layers;
mod loss;
mod optim;
mod params;
pub mod reference;
mod tensor;

pub use gradcheck::{grad_check, grad_check_objective, grad_check_report, probe_weight, GradCheckReport, Objective};
pub use layers::{softmax_rows, ActivationPattern, LayerSpec, Stack, Tape};
pub use loss::{cross_entropy, cross_entropy_reduced, cross_entropy_single, Reduction};
pub use optim::Sgd;
pub use params::{Param, ParamStore, PARAM_MAGIC};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid layer configuration: {0}")]
    Config(String),
    #[error("invalid label {label} for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("invalid hyperparameter: {0}")]
    Hyperparameter(String),
    #[error("backward called on '{0}' without a recorded forward pass")]
    NoForwardPass(String),
    #[error("state error: {0}")]
    State(String),
    #[error("non-finite value produced in {0}")]
    NonFinite(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("malformed parameter file: {0}")]
    Format(String),
}
