use std::path::{Path, PathBuf};

use mtuc_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid track: {0}")]
    InvalidTrack(String),

    #[error("unknown track preset `{0}` (expected track7_like, track8_like, straight, circle(k) or s_bend)")]
    UnknownPreset(String),

    #[error("position outside the track corridor at s = {s:.3} (offset {offset:.3} m)")]
    OutOfCorridor { s: f64, offset: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid scene: {0}")]
    Scene(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("label: {0}")]
    Label(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: usize, step: usize, detail: String },

    #[error("lane lost: no lane detected for {frames} consecutive frames")]
    LaneLost { frames: usize },

    #[error("format: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn csv(path: &Path, source: csv::Error) -> Self {
        Self::Csv {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
