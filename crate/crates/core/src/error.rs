use std::path::PathBuf;

use r2r_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(PathBuf),
    #[error("corrupt image {path}: {reason}")]
    CorruptImage { path: PathBuf, reason: String },
    #[error("missing directory: {0}")]
    MissingDirectory(PathBuf),
    #[error("no counterpart for {0} in the paired folder")]
    UnmatchedPair(String),
    #[error("pair {id}: low is {low:?} but normal is {normal:?}")]
    ShapeMismatch {
        id: String,
        low: (usize, usize),
        normal: (usize, usize),
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("patch size {patch} exceeds image {id} of size {height}x{width}")]
    PatchTooLarge {
        patch: usize,
        id: String,
        height: usize,
        width: usize,
    },
    #[error("pixel value {0} outside [0, 1]")]
    RangeError(f64),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("{op}: expected {expected} channels, got {got}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("spatial dims {height}x{width} must be even")]
    OddDims { height: usize, width: usize },
    #[error("spatial dims {height}x{width} are not divisible by {multiple}")]
    NonDivisibleDims {
        height: usize,
        width: usize,
        multiple: usize,
    },
    #[error("imaginary residue {residue} of inverse transform exceeds {bound}")]
    NonConjugateSpectrum { residue: f64, bound: f64 },
    #[error("input {height}x{width} is smaller than the minimum {min}x{min}")]
    InputTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },
    #[error("stage {stage} requires a {missing} checkpoint")]
    MissingUpstream {
        stage: &'static str,
        missing: &'static str,
    },
    #[error("non-finite loss at step {step}")]
    DivergedLoss { step: usize },
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGrad(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
