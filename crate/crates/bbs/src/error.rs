//! Error types for the BBS toolkit.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("payload length mismatch in {path}: header declares {expected} values, found {actual}")]
    PayloadMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in volume data at index {index}")]
    NonFinite { index: usize },

    #[error("volume invariant violated: {0}")]
    InvalidVolume(String),

    #[error("block at {center:?} with radius {radius} exceeds volume bounds {dims:?}")]
    BlockOutOfBounds {
        center: [usize; 3],
        radius: usize,
        dims: [usize; 3],
    },

    #[error("dimension mismatch: {0}")]
    DimsMismatch(String),

    #[error("insufficient samples at voxel {voxel:?}: group {group} retained {count}")]
    InsufficientSamples {
        voxel: [usize; 3],
        group: u8,
        count: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("mask too small for noise estimation: {0} voxels (need >= 100)")]
    MaskTooSmall(usize),

    #[error("empty query set")]
    EmptyQuerySet,

    #[error("zero total weight in group")]
    ZeroTotalWeight,

    #[error("tensor is not symmetric positive definite at voxel {0:?}")]
    NonSpdTensor([usize; 3]),

    #[error("structure out of bounds: {0}")]
    StructureOutOfBounds(String),

    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 data, 4 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Internal(_) => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
