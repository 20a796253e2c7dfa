use std::io;

use thiserror::Error;

/// Errors produced by the kinematics, model, training and data layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate rotation input (norm {norm:e})")]
    DegenerateRotation { norm: f64 },

    #[error("look-at target coincides with joint position (distance {distance:e})")]
    DegenerateLookAt { distance: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("skeleton error: {0}")]
    Skeleton(String),

    #[error("value outside domain: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("effector set is empty")]
    EmptyInput,

    #[error("invalid effector at {path}: {message}")]
    InvalidEffector { path: String, message: String },

    #[error("non-finite value in {term}")]
    Numerical { term: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
