//! Composite factor-aligned symmetry learning (CFASL) for VAE disentanglement.
//!
//! The crate is organised bottom-up:
//!
//! - [`codebook`]: trainable Lie-algebra generators, the matrix exponential
//!   and the parallel / perpendicular / sparsity / commutativity losses.
//! - [`composition`]: two-step attention that builds a composite symmetry
//!   for a pair of latents, plus the section prediction loss.
//! - [`vae`]: convolutional encoder/decoder, pair batching, β-VAE and
//!   β-TCVAE objectives.
//! - [`equivariance`]: encoder/decoder equivariance losses and the total
//!   objective with ablation masks.
//! - [`data`]: ground-truth-factor datasets (synthetic renderer, dSprites).
//! - [`metrics`]: FVM and the multi-factor m-FVM_k score.
//! - [`analysis`]: data exports for latent scatter, eigenvector heatmaps,
//!   traversals, composite decomposition and replay.
//! - [`train`]: run configuration, Adam, checkpoints and the training loop.

pub mod analysis;
pub mod codebook;
pub mod composition;
pub mod data;
pub mod equivariance;
pub mod error;
pub mod exec;
pub mod metrics;
pub mod nn;
pub mod train;
pub mod vae;

pub use error::{Error, Result};
pub use exec::ExecMode;
