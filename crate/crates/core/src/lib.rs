//! Text-guided face generation and manipulation on a synthetic face corpus.
//!
//! The pipeline: a procedural renderer produces labeled face images; a small
//! style-based generator, inverter, joint text/image embedder, identity net,
//! discriminator, and attribute predictor are pretrained on them and frozen;
//! a level–channel mapper is then trained on top of the frozen bundle to turn
//! a text prompt into an edit of the generator's layered latent space.

pub mod backbones;
pub mod cli;
pub mod config;
pub mod demo;
pub mod evaluation;
pub mod latent;
pub mod losses;
pub mod mapper;
pub mod synth;
pub mod training;
pub mod viz;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("gate `{gate}` failed: achieved {achieved:.4}, required {required}")]
    Gate {
        gate: String,
        achieved: f64,
        required: String,
    },

    #[error("training aborted at step {step}: non-finite loss ({detail})")]
    NonFiniteLoss { step: usize, detail: String },

    #[error(transparent)]
    Tensor(#[from] promptface_tensor::TensorError),

    #[error(transparent)]
    Checkpoint(#[from] promptface_tensor::CheckpointError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
