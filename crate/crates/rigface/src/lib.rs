//! Identity-preserving face editing at desk scale.
//!
//! The pipeline edits one attribute of a face image (expression, head pose,
//! or lighting) while keeping the others and the identity fixed. It is built
//! from five cooperating pieces:
//!
//! * [`face3d`] — a procedural blendshape face model with spherical-harmonics
//!   Lambertian shading, a z-buffer software rasterizer, and a derivative-free
//!   analysis-by-synthesis parameter fitter.
//! * [`attribprov`] — the spatial attribute provider that turns face
//!   parameters into three disentangled conditions: a pose+light rendering,
//!   a gray-masked background, and an expression coefficient vector.
//! * [`latentcodec`] — an exactly invertible image ↔ latent transform.
//! * [`diffusion`] + [`facefusion`] — a conditioned denoising UNet whose
//!   self-attention fuses identity features from a twin identity encoder,
//!   plus the noise schedule and a deterministic reverse sampler.
//! * [`trainloop`] / [`evalmetrics`] — end-to-end optimization over synthetic
//!   pairs from [`synthgen`], and the full evaluation metric suite.
//!
//! Everything is deterministic given a seed and runs in double precision on
//! the CPU. The `examples/` directory demonstrates each capability; the
//! `rigface` binary exposes the same operations as subcommands
//! (`synth`, `train`, `edit`, `eval`, `ablate`).

pub mod attribprov;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod diffusion;
pub mod evalmetrics;
pub mod face3d;
pub mod facefusion;
pub mod imageio;
pub mod latentcodec;
pub mod synthgen;
pub mod trainloop;

use std::path::PathBuf;

/// Errors shared across the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument violated an operation's preconditions.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Two arrays that must agree in shape did not.
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    /// A configuration file or override was rejected.
    #[error("config error: {0}")]
    Config(String),

    /// A numeric failure (non-finite loss or parameter).
    #[error("numeric failure: {0}")]
    NonFinite(String),

    /// Checkpoint container could not be read or has a mismatched version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// An I/O failure, annotated with the offending path.
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
