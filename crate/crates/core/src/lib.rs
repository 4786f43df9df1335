//! Matching-oriented product quantization for ad-hoc retrieval.
//!
//! An encoder and PQ codebooks are trained jointly under a contrastive
//! query/key matching loss, with straight-through hard codeword selection.
//! The crate also provides a simulated multi-device trainer that shares
//! negatives across devices, reconstruction-loss and k-means baselines,
//! ADC retrieval, and runnable checks of the quantization properties the
//! method relies on.

pub mod dcs;
pub mod grad;
pub mod io;
pub mod model;
pub mod objectives;
pub mod quantizer;
pub mod retrieval;
pub mod trainer;
pub mod verification;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Grad(#[from] grad::GradError),
    #[error(transparent)]
    Quant(#[from] quantizer::QuantError),
    #[error(transparent)]
    Format(#[from] io::FormatError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("verification failed: {0}")]
    Verification(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
