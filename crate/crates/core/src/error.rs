use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("manifest {path} line {line}: {message}")]
    ManifestParse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("video {video_id} has {frame_count} frames, too short for clip length {clip_len}")]
    VideoTooShort {
        video_id: String,
        frame_count: usize,
        clip_len: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("checkpoint hash mismatch in {path}: stored {stored}, computed {computed}")]
    CheckpointHash {
        path: PathBuf,
        stored: String,
        computed: String,
    },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint group {group} does not match model config: {detail}")]
    CheckpointMismatch { group: String, detail: String },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
