//! β-VAE and β-TCVAE objectives, returned as quantities to minimize.

use std::f64::consts::PI;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use super::EncoderOutput;
use crate::error::{Error, Result};
use crate::nn::{device, softplus, DTYPE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    #[default]
    BetaVae,
    BetaTcvae,
}

/// Aggregate-posterior estimator used by β-TCVAE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TcEstimator {
    /// Every batch member weighted `1 / (N M)`.
    MinibatchWeighted,
    /// Own sample weighted `1/N`, the other `M-1` weighted `(N-1) / (N (M-1))`.
    #[default]
    MinibatchStratified,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    #[default]
    Bernoulli,
    ContinuousBernoulli,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    pub beta: f64,
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub gamma: f64,
    /// Dataset size `N`, needed by the β-TCVAE estimators.
    #[serde(default)]
    pub dataset_size: Option<usize>,
    #[serde(default)]
    pub tc_estimator: TcEstimator,
    #[serde(default)]
    pub likelihood: Likelihood,
}

fn one() -> f64 {
    1.0
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            kind: ObjectiveKind::BetaVae,
            beta: 4.0,
            alpha: 1.0,
            gamma: 1.0,
            dataset_size: None,
            tc_estimator: TcEstimator::default(),
            likelihood: Likelihood::default(),
        }
    }
}

impl ObjectiveConfig {
    pub fn beta_vae(beta: f64) -> Self {
        Self { beta, ..Self::default() }
    }

    pub fn beta_tcvae(beta: f64, dataset_size: usize) -> Self {
        Self { kind: ObjectiveKind::BetaTcvae, beta, dataset_size: Some(dataset_size), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if self.kind == ObjectiveKind::BetaTcvae && self.dataset_size.is_none() {
            return Err(Error::invalid("β-TCVAE needs dataset_size"));
        }
        Ok(())
    }

    /// Dispatches to the configured objective.
    pub fn loss(&self, x: &Tensor, logits: &Tensor, out: &EncoderOutput, z: &Tensor) -> Result<VaeLoss> {
        match self.kind {
            ObjectiveKind::BetaVae => elbo_beta_vae_with(x, logits, out, self.beta, self.likelihood),
            ObjectiveKind::BetaTcvae => elbo_beta_tcvae(x, logits, out, z, self),
        }
    }
}

/// Batch-mean loss terms. `total` is what gets minimized.
#[derive(Debug, Clone)]
pub struct VaeLoss {
    pub total: Tensor,
    pub reconstruction: Tensor,
    /// Closed-form KL for β-VAE; the MC estimate `E[log q(z|x) - log p(z)]` for β-TCVAE.
    pub kl: Tensor,
    pub mutual_information: Option<Tensor>,
    pub total_correlation: Option<Tensor>,
    pub dimension_kl: Option<Tensor>,
}

/// Per-sample Bernoulli negative log-likelihood from logits, `(B)`.
pub fn bernoulli_nll(x: &Tensor, logits: &Tensor) -> Result<Tensor> {
    if x.dims() != logits.dims() {
        return Err(Error::invalid(format!("images {:?} and logits {:?} differ in shape", x.dims(), logits.dims())));
    }
    let per_pixel = (softplus(logits)? - (x * logits)?)?;
    Ok(per_pixel.flatten_from(1)?.sum(1)?)
}

/// `log C(λ)` of the continuous Bernoulli at `λ = sigmoid(l)`, i.e. `log(l / tanh(l/2))`.
fn continuous_bernoulli_log_norm(logits: &Tensor) -> Result<Tensor> {
    let small = logits.abs()?.lt(1e-4)?;
    let safe = small.where_cond(&logits.ones_like()?, logits)?;
    let exact = (&safe / (&safe * 0.5)?.tanh()?)?;
    let series = ((logits.sqr()? / 6.0)? + 2.0)?;
    Ok(small.where_cond(&series, &exact)?.log()?)
}

fn reconstruction(x: &Tensor, logits: &Tensor, likelihood: Likelihood) -> Result<Tensor> {
    let nll = bernoulli_nll(x, logits)?;
    Ok(match likelihood {
        Likelihood::Bernoulli => nll,
        Likelihood::ContinuousBernoulli => {
            (nll - continuous_bernoulli_log_norm(logits)?.flatten_from(1)?.sum(1)?)?
        }
    })
}

/// `KL(N(μ, σ²) || N(0, 1))` per dimension, `(B, D)`.
pub fn gaussian_kl_per_dim(mu: &Tensor, log_var: &Tensor) -> Result<Tensor> {
    let inner = ((mu.sqr()? + log_var.exp()?)? - log_var)?;
    Ok(((inner - 1.0)? * 0.5)?)
}

/// Negative ELBO: Bernoulli reconstruction plus `β` times the closed-form KL.
pub fn elbo_beta_vae(x: &Tensor, logits: &Tensor, out: &EncoderOutput, beta: f64) -> Result<VaeLoss> {
    elbo_beta_vae_with(x, logits, out, beta, Likelihood::Bernoulli)
}

fn elbo_beta_vae_with(
    x: &Tensor,
    logits: &Tensor,
    out: &EncoderOutput,
    beta: f64,
    likelihood: Likelihood,
) -> Result<VaeLoss> {
    let reconstruction = reconstruction(x, logits, likelihood)?.mean(0)?;
    let kl = gaussian_kl_per_dim(&out.mu, &out.log_var)?.sum(1)?.mean(0)?;
    let total = (&reconstruction + (&kl * beta)?)?;
    Ok(VaeLoss { total, reconstruction, kl, mutual_information: None, total_correlation: None, dimension_kl: None })
}

/// `log Σ exp` along `dim`, shifting by the detached maximum.
fn logsumexp(x: &Tensor, dim: usize) -> Result<Tensor> {
    let shift = x.detach().max_keepdim(dim)?;
    let summed = x.broadcast_sub(&shift)?.exp()?.sum_keepdim(dim)?.log()?;
    Ok((summed + shift)?.squeeze(dim)?)
}

fn log_weight_matrix(m: usize, n: usize, estimator: TcEstimator) -> Result<Tensor> {
    let (n_f, m_f) = (n as f64, m as f64);
    let data: Vec<f64> = (0..m * m)
        .map(|k| match estimator {
            TcEstimator::MinibatchWeighted => -(n_f * m_f).ln(),
            TcEstimator::MinibatchStratified if k / m == k % m => -n_f.ln(),
            TcEstimator::MinibatchStratified => ((n_f - 1.0) / (n_f * (m_f - 1.0))).ln(),
        })
        .collect();
    Ok(Tensor::from_vec(data, (m, m), &device())?)
}

/// Decomposed β-TCVAE objective: reconstruction + α·MI + β·TC + γ·dimension-wise KL.
///
/// `z` are the reparameterized samples that produced `logits`.
pub fn elbo_beta_tcvae(
    x: &Tensor,
    logits: &Tensor,
    out: &EncoderOutput,
    z: &Tensor,
    config: &ObjectiveConfig,
) -> Result<VaeLoss> {
    let (m, d) = out.mu.dims2()?;
    if m < 2 {
        return Err(Error::invalid("β-TCVAE estimation needs a batch of at least 2"));
    }
    let n = config.dataset_size.ok_or_else(|| Error::invalid("β-TCVAE needs dataset_size"))?;
    if n < m {
        return Err(Error::invalid(format!("dataset_size {n} smaller than batch {m}")));
    }
    if z.dims() != [m, d] {
        return Err(Error::invalid("latent samples do not match posterior shape"));
    }
    let log_2pi = (2.0 * PI).ln();
    let reconstruction = reconstruction(x, logits, config.likelihood)?.mean(0)?;

    // density[i, j, d] = log q(z_i,d | x_j)
    let diff = z.unsqueeze(1)?.broadcast_sub(&out.mu.unsqueeze(0)?)?;
    let inv_var = out.log_var.neg()?.exp()?.unsqueeze(0)?;
    let quad = diff.sqr()?.broadcast_mul(&inv_var)?;
    let density = ((quad.broadcast_add(&out.log_var.unsqueeze(0)?)? + log_2pi)? * -0.5)?;

    let own = ((((z - &out.mu)?.sqr()? * out.log_var.neg()?.exp()?)? + &out.log_var)? + log_2pi)?;
    let log_qz_x = (own.sum(1)? * -0.5)?;
    let log_pz = ((z.sqr()? + log_2pi)?.sum(1)? * -0.5)?;

    let weights = log_weight_matrix(m, n, config.tc_estimator)?.to_dtype(DTYPE)?;
    let joint = density.sum(D::Minus1)?.add(&weights)?;
    let log_qz = logsumexp(&joint, 1)?;
    let marginal = density.broadcast_add(&weights.unsqueeze(2)?)?;
    let log_qz_prod = logsumexp(&marginal, 1)?.sum(1)?;

    let mi = (&log_qz_x - &log_qz)?.mean(0)?;
    let tc = (&log_qz - &log_qz_prod)?.mean(0)?;
    let dw = (&log_qz_prod - &log_pz)?.mean(0)?;
    let kl = (&log_qz_x - &log_pz)?.mean(0)?;
    let total = (((&reconstruction + (&mi * config.alpha)?)? + (&tc * config.beta)?)? + (&dw * config.gamma)?)?;
    Ok(VaeLoss {
        total,
        reconstruction,
        kl,
        mutual_information: Some(mi),
        total_correlation: Some(tc),
        dimension_kl: Some(dw),
    })
}
