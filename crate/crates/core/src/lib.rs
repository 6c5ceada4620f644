//! Attention-aware adversarial cross-modal hashing.
//!
//! Trains paired image-grid/text encoders with a generative binary attention
//! mask and discriminative hash coders under an alternating min-max objective,
//! then performs Hamming-space cross-modal retrieval with MAP/PR evaluation.
//!
//! The pipeline for one instance of either modality is
//! `encode -> mask -> split -> hash`, where the mask stage thresholds a
//! softmax distribution into a binary foreground selection and the split
//! stage divides features into foreground and background parts. Hash coders
//! map both parts to q-dimensional relaxed codes in (-1, 1); retrieval
//! binarizes the foreground codes and ranks by Hamming distance.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod encoders;
pub mod gradcheck;
pub mod hashcoder;
pub mod kernel;
pub mod losses;
pub mod model;
pub mod retrieval;
pub mod trainer;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Data(String),
    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
