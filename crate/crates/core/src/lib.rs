//! In-context rectified-flow image editing at desk scale.
//!
//! A velocity network over concatenated target and context latent tokens,
//! trained with the rectified flow-matching objective and sampled with an
//! Euler ODE solver. The modules follow the pipeline:
//!
//! - [`schedule`]: forward process, log-SNR, logit-normal timesteps, shifts
//! - [`positions`]: `(t, h, w)` position triplets and 3D rotary embeddings
//! - [`backbone`]: double-stream and fused single-stream transformer
//! - [`latentseq`]: patch codec, token grids, sequence building, metrics
//! - [`flow`]: targets, loss with context dropout, training loop
//! - [`sampler`]: Euler sampling, guidance, multi-turn editing
//! - [`toybench`]: procedural edit benchmark with an exact oracle
//!
//! Everything runs in `f64`.

mod binfmt;

pub mod backbone;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod flow;
pub mod latentseq;
pub mod nn;
pub mod plot;
pub mod positions;
pub mod sampler;
pub mod schedule;
pub mod toybench;
pub mod verify;

pub use error::{Error, Result};

/// Crate version, extended with `FLOWEDIT_GIT_DESCRIBE` when that variable
/// is set at build time.
pub fn build_version() -> String {
    match option_env!("FLOWEDIT_GIT_DESCRIBE") {
        Some(g) if !g.is_empty() => format!("{} ({g})", env!("CARGO_PKG_VERSION")),
        _ => env!("CARGO_PKG_VERSION").to_string(),
    }
}
