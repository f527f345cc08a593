//! Minimal dense-tensor kernel for training small transformers on the CPU.
//!
//! * [`tensor`]: row-major tensors generic over `f32`/`f64`.
//! * [`graph`]: tape-based reverse-mode autodiff.
//! * [`nn`]: linear, layer-norm, embedding, multi-head attention and
//!   pre-norm encoder/decoder layers, each with a graph forward and a
//!   graph-free inference path.
//! * [`optim`]: AdamW, gradient clipping and the step LR schedule.
//! * [`sample`]: top-k sampling.
//! * [`checkpoint`]: the `RALFCKPT` container.
//! * [`gradcheck`]: finite-difference verification.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod param;
pub mod sample;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{Gradients, Graph, Mode, Var};
pub use optim::{clip_grad_norm, AdamW, StepSchedule};
pub use param::{ParamId, ParamStore, Parameter};
pub use sample::topk_sample;
pub use tensor::{DType, Scalar, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("concatenation of zero tensors")]
    EmptyConcat,
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("parameter {0} registered twice")]
    DuplicateParam(String),
    #[error("parameter {0} missing from checkpoint")]
    MissingParam(String),
    #[error("empty decoding space")]
    EmptyDecodingSpace,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
