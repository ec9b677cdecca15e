//! Focal vision backbones built on learnable Gabor filters.
//!
//! The crate is a self-contained CPU stack: a dense tensor core with
//! reverse-mode differentiation ([`tensor`], [`tape`], [`ops`]), the Gabor
//! kernel mathematics with analytic parameter gradients ([`gabor`]), the
//! composite blocks that assemble them into a backbone ([`blocks`],
//! [`model`]), binary dataset loaders ([`data`]), an AdamW training loop
//! ([`train`]), finite-difference verification suites ([`gradcheck`]) and a
//! batch CLI ([`cli`]).
//!
//! Everything trains in `f32`; gradient verification runs the same code in
//! `f64`, which is why the numeric layers are generic over [`Scalar`].

pub mod blocks;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod gabor;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod ops;
pub mod params;
pub mod pgm;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use scalar::{Dtype, Scalar};
pub use tape::{Tape, VarId};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors produced anywhere in the stack. The CLI maps these onto its exit
/// code contract (usage/input problems exit 2, numeric aborts exit 3).
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes do not line up; the message names the offending axis.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A scalar argument is outside its legal range.
    #[error("parameter error: {0}")]
    Parameter(String),
    /// A model or layer configuration is invalid.
    #[error("configuration error: {0}")]
    Config(String),
    /// A file does not follow its binary format.
    #[error("format error: {0}")]
    Format(String),
    /// Two pieces of data that must agree do not.
    #[error("consistency error: {0}")]
    Consistency(String),
    /// An API was driven in an unsupported way.
    #[error("usage error: {0}")]
    Usage(String),
    /// Input data is invalid (for example a label out of range).
    #[error("input error: {0}")]
    Input(String),
    /// A non-finite value surfaced where the math guarantees finiteness.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
