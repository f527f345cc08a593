//! Retrieval-augmented content-aware layout generation.
//!
//! Given a canvas image (and its saliency map) the generator autoregressively
//! emits a layout token sequence. Before decoding, the nearest training
//! layouts by saliency similarity are looked up, encoded by a frozen layout
//! encoder and fused with the image features.
//!
//! The main entry points:
//!
//! * [`data`]: samples, layouts, boxes and the on-disk dataset format.
//! * [`tokenizer`]: layout ⇄ token sequences.
//! * [`encoders`]: image encoder and the frozen layout encoder.
//! * [`retrieval`]: saliency embeddings and the nearest-neighbor database.
//! * [`generator`]: the fusion model, training and constrained decoding.
//! * [`tasks`]: constraint specifications and satisfaction checks.
//! * [`metrics`]: layout quality metrics.
//! * [`synth`]: the synthetic dataset generator.
//! * [`render`]: SVG rendering of layouts.

pub mod benchmark;
pub mod cli;
pub mod data;
pub mod encoders;
pub mod generator;
pub mod metrics;
pub mod render;
pub mod retrieval;
pub mod synth;
pub mod tasks;
pub mod tokenizer;

pub use data::{AnnotatedSample, BBox, Canvas, CategorySchema, Dataset, Element, Layout, SaliencyMap, Split};
pub use tokenizer::Vocabulary;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Token(#[from] tokenizer::TokenError),
    #[error(transparent)]
    Numerics(#[from] ralf_numerics::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("layout encoder is not frozen")]
    EncoderNotFrozen,
    #[error("layout encoder stamp {found} does not match database stamp {expected}")]
    StampMismatch { expected: String, found: String },
    #[error("database needs at least {needed} entries, has {available}")]
    DatabaseTooSmall { needed: usize, available: usize },
    #[error("malformed database: {0}")]
    DatabaseFormat(String),
    #[error("constraint violated: {0}")]
    Constraint(String),
    #[error("empty decoding space at step {step}: {constraint}")]
    EmptyDecodingSpace { step: usize, constraint: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
