//! Codebook regularizers: parallel, perpendicular, sparsity, commutativity.
//!
//! The first three act on latent changes `Δ = z - g z` laid out as a
//! `(B, S, SS, D)` tensor; each returns the per-latent sum averaged over
//! the batch. Changes with norm below [`DEGENERATE_NORM`] carry no
//! direction, and any pair touching one contributes exactly zero.

use candle_core::{Tensor, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{as_batch, SymmetryCodebook};
use crate::error::{Error, Result};
use crate::nn::{device, to_vec, DTYPE};

pub const DEGENERATE_NORM: f64 = 1e-12;
/// Lower clamp on the cosine inside the parallel loss.
pub const COS_FLOOR: f64 = 1e-6;
/// Same-section pairs are enumerated exhaustively up to this section size.
pub const EXHAUSTIVE_SECTION_LIMIT: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParallelForm {
    /// `-log(clamp(cos, COS_FLOOR, 1))`, minimized by parallel changes.
    #[default]
    NegLogCos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerpForm {
    #[default]
    CosSq,
    AbsCos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerpSampling {
    /// Every element pair of every section pair.
    Full,
    /// This many random element pairs per unordered section pair.
    PerSectionPair(usize),
}

/// Unit directions plus a 0/1 validity mask, both `(B, M, D)` / `(B, M)` with `M = S * SS`.
fn directions(changes: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, s, ss, d) = changes.dims4()?;
    let flat = changes.reshape((b, s * ss, d))?;
    let sumsq = flat.sqr()?.sum(D::Minus1)?;
    let valid: Vec<f64> = to_vec(&sumsq)?
        .into_iter()
        .map(|v| f64::from(v.sqrt() >= DEGENERATE_NORM))
        .collect();
    let valid = Tensor::from_vec(valid, (b, s * ss), &device())?;
    // The floor keeps the sqrt gradient finite for degenerate rows; those rows are masked out.
    let norms = sumsq.maximum(DEGENERATE_NORM * DEGENERATE_NORM)?.sqrt()?;
    let unit = flat.broadcast_div(&norms.unsqueeze(D::Minus1)?)?;
    Ok((unit, valid))
}

/// Cosines and pair masks for flat element index pairs; shapes `(B, P)`.
fn pair_cosines(changes: &Tensor, pairs: &[(usize, usize)]) -> Result<(Tensor, Tensor)> {
    let (unit, valid) = directions(changes)?;
    let left: Vec<u32> = pairs.iter().map(|&(a, _)| a as u32).collect();
    let right: Vec<u32> = pairs.iter().map(|&(_, b)| b as u32).collect();
    let left = Tensor::new(left.as_slice(), &device())?;
    let right = Tensor::new(right.as_slice(), &device())?;
    let cos = (unit.index_select(&left, 1)? * unit.index_select(&right, 1)?)?.sum(D::Minus1)?;
    let mask = (valid.index_select(&left, 1)? * valid.index_select(&right, 1)?)?;
    Ok((cos, mask))
}

/// Unordered same-section pairs `(j, k)`, `j < k`, as flat indices `i * SS + j`.
///
/// Exhaustive when `SS <= 16`; otherwise `pair_budget` random pairs per section.
pub fn same_section_pairs(
    sections: usize,
    per_section: usize,
    pair_budget: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..sections {
        let base = i * per_section;
        if per_section <= EXHAUSTIVE_SECTION_LIMIT {
            for j in 0..per_section {
                for k in j + 1..per_section {
                    pairs.push((base + j, base + k));
                }
            }
        } else {
            for _ in 0..pair_budget {
                let j = rng.random_range(0..per_section);
                let mut k = rng.random_range(0..per_section - 1);
                if k >= j {
                    k += 1;
                }
                pairs.push((base + j.min(k), base + j.max(k)));
            }
        }
    }
    pairs
}

/// Cross-section pairs for every unordered section pair `(i, k)`, `i < k`.
fn cross_section_pairs(
    sections: usize,
    per_section: usize,
    sampling: PerpSampling,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..sections {
        for k in i + 1..sections {
            match sampling {
                PerpSampling::Full => {
                    for j in 0..per_section {
                        for l in 0..per_section {
                            pairs.push((i * per_section + j, k * per_section + l));
                        }
                    }
                }
                PerpSampling::PerSectionPair(n) => {
                    for _ in 0..n {
                        let j = rng.random_range(0..per_section);
                        let l = rng.random_range(0..per_section);
                        pairs.push((i * per_section + j, k * per_section + l));
                    }
                }
            }
        }
    }
    pairs
}

fn masked_batch_mean(values: &Tensor, mask: &Tensor) -> Result<Tensor> {
    Ok((values * mask)?.sum(D::Minus1)?.mean(0)?)
}

fn zero() -> Result<Tensor> {
    Ok(Tensor::zeros((), DTYPE, &device())?)
}

/// Parallel loss over explicit same-section pairs.
pub fn parallel_loss_from_changes(
    changes: &Tensor,
    pairs: &[(usize, usize)],
    form: ParallelForm,
) -> Result<Tensor> {
    if pairs.is_empty() {
        return zero();
    }
    let (cos, mask) = pair_cosines(changes, pairs)?;
    let terms = match form {
        ParallelForm::NegLogCos => cos.clamp(COS_FLOOR, 1.0)?.log()?.neg()?,
    };
    masked_batch_mean(&terms, &mask)
}

pub fn parallel_loss(
    codebook: &SymmetryCodebook,
    z: &Tensor,
    pair_budget: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if pair_budget == 0 {
        return Err(Error::invalid("pair_budget must be >= 1"));
    }
    let z = as_batch(z, codebook.latent_dim())?;
    let changes = codebook.latent_changes(&z)?;
    let pairs =
        same_section_pairs(codebook.num_sections(), codebook.elements_per_section(), pair_budget, rng);
    parallel_loss_from_changes(&changes, &pairs, ParallelForm::NegLogCos)
}

/// Perpendicular loss; pairs are drawn from `rng` unless sampling is [`PerpSampling::Full`].
pub fn perpendicular_loss_from_changes(
    changes: &Tensor,
    sampling: PerpSampling,
    form: PerpForm,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let (_, s, ss, _) = changes.dims4()?;
    if s < 2 {
        return Err(Error::invalid("perpendicular loss needs at least two sections"));
    }
    let pairs = cross_section_pairs(s, ss, sampling, rng);
    if pairs.is_empty() {
        return zero();
    }
    let (cos, mask) = pair_cosines(changes, &pairs)?;
    let terms = match form {
        PerpForm::CosSq => cos.sqr()?,
        PerpForm::AbsCos => cos.abs()?,
    };
    masked_batch_mean(&terms, &mask)
}

pub fn perpendicular_loss(
    codebook: &SymmetryCodebook,
    z: &Tensor,
    pairs_per_step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if codebook.num_sections() < 2 {
        return Err(Error::invalid("perpendicular loss needs at least two sections"));
    }
    let z = as_batch(z, codebook.latent_dim())?;
    let changes = codebook.latent_changes(&z)?;
    perpendicular_loss_from_changes(&changes, PerpSampling::PerSectionPair(pairs_per_step), PerpForm::CosSq, rng)
}

/// `Σ_{i,j} [(Σ_k Δ_k²)² - (max_k Δ_k²)²]`, averaged over the batch.
pub fn sparsity_loss_from_changes(changes: &Tensor) -> Result<Tensor> {
    let sq = changes.sqr()?;
    let total = sq.sum(D::Minus1)?.sqr()?;
    let peak = sq.max(D::Minus1)?.sqr()?;
    Ok((total - peak)?.sum((1, 2))?.mean(0)?)
}

pub fn sparsity_loss(codebook: &SymmetryCodebook, z: &Tensor) -> Result<Tensor> {
    let z = as_batch(z, codebook.latent_dim())?;
    sparsity_loss_from_changes(&codebook.latent_changes(&z)?)
}

/// `Σ_{a,b} ||A_a A_b - A_b A_a||_F²` over all ordered pairs of `(M, D, D)` matrices.
pub fn commutator_sum(matrices: &Tensor) -> Result<Tensor> {
    let (m, d, _) = matrices.dims3()?;
    // products[a, i, b, j] = (A_a A_b)_{ij}
    let left = matrices.reshape((m * d, d))?;
    let right = matrices.permute((1, 0, 2))?.reshape((d, m * d))?;
    let products = left.matmul(&right)?.reshape((m, d, m, d))?;
    let swapped = products.permute((2, 1, 0, 3))?;
    Ok((products - swapped)?.sqr()?.sum_all()?)
}

pub fn commutativity_loss(codebook: &SymmetryCodebook) -> Result<Tensor> {
    let d = codebook.latent_dim();
    commutator_sum(&codebook.generators().reshape((codebook.len(), d, d))?)
}
