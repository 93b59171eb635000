//! Base VAE machinery that the symmetry losses plug into.

mod model;
mod objective;
mod pairs;

pub use model::{ConvVae, EncoderOutput, VaeArchitecture};
pub use objective::{
    bernoulli_nll, elbo_beta_tcvae, elbo_beta_vae, gaussian_kl_per_dim, Likelihood, ObjectiveConfig, ObjectiveKind,
    TcEstimator, VaeLoss,
};
pub use pairs::{make_pair_batch, PairBatch};
