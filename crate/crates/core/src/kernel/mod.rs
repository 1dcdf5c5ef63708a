//! Small deterministic compute kernel: tensors, parameters, layers with
//! explicit backward passes, an optimizer and checkpoints.
//!
//! There is no tape. Every layer exposes `forward` returning a cache and a
//! `backward` that consumes it; models compose them in a fixed order.

mod checkpoint;
mod gradcheck;
mod layers;
mod ops;
mod optim;
mod params;
mod rng;
mod tensor;

use thiserror::Error;

pub use checkpoint::{config_hash, Checkpoint};
pub use gradcheck::grad_check;
pub use layers::{affine, affine_backward, sigmoid, Affine, LstmCache, LstmCell};
pub use ops::{
    argmax, bernoulli_sample, categorical_sample, cosine, cosine_grad, entropy, entropy_grad,
    log_softmax, logprob_grad, softmax, SampleMode,
};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{Param, ParamId, ParamSet};
pub use rng::RngStreams;
pub use tensor::{axpy, dot, norm, Tensor};

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
    #[error("cosine of a zero-norm vector is undefined")]
    ZeroNorm,
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
    #[error("learning rate must be positive and finite, got {0}")]
    InvalidLearningRate(f64),
    #[error("optimizer state does not match parameter layout")]
    OptimizerLayout,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
