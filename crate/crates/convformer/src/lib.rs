//! ConvFormer block kernels: pooling tokenizer, CNN-style self-attention with a
//! learnable Gaussian receptive-field mask, convolutional feed-forward network,
//! a toy segmentation model/trainer, and a finite-difference gradient oracle.
//!
//! Everything runs in f64 on the CPU with hand-written forward/backward passes.

pub mod block;
pub mod cffn;
pub mod cli;
pub mod csa;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod model;
pub mod pooling;
pub mod tensor;
pub mod trainer;

pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: String, detail: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{0}")]
    Invalid(String),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &str, detail: impl Into<String>) -> Error {
        Error::Shape {
            op: op.to_string(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
