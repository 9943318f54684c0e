use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, IamlError>;

#[derive(Debug, Error)]
pub enum IamlError {
    #[error("missing directory: {0}")]
    MissingDirectory(PathBuf),
    #[error("split `{split}` under {root} contains no image pairs")]
    EmptySplit { root: PathBuf, split: String },
    #[error("pair `{pair_id}`: low is {low:?} but clean is {clean:?}")]
    DimensionMismatch {
        pair_id: String,
        low: (u32, u32),
        clean: (u32, u32),
    },
    #[error("cannot decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("{0} is not an RGB image")]
    NonRgb(PathBuf),
    #[error("crop {size} exceeds image {height}x{width}")]
    CropTooLarge {
        size: usize,
        height: usize,
        width: usize,
    },
    #[error("expected 3 channels, got {0}")]
    ChannelCount(usize),
    #[error("beta must be non-negative, got {0}")]
    NegativeBeta(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("pyramid depth mismatch: student {student}, teacher {teacher}")]
    PyramidDepthMismatch { student: usize, teacher: usize },
    #[error("image {height}x{width} is smaller than the {window}x{window} SSIM window")]
    ImageTooSmall {
        height: usize,
        width: usize,
        window: usize,
    },
    #[error("unknown loss configuration `{0}`")]
    UnknownConfigTag(String),
    #[error("spatial dims {height}x{width} are not divisible by {factor}")]
    IndivisibleDims {
        height: usize,
        width: usize,
        factor: usize,
    },
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),
    #[error("perceptual model unavailable: {0}")]
    ModelUnavailable(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: expected {expected}")]
    TypeError { key: String, expected: String },
    #[error("config key `{key}`: {reason}")]
    RangeError { key: String, reason: String },
    #[error("config parse error: {0}")]
    ConfigSyntax(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
