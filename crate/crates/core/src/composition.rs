//! Two-step composition of a pair-specific symmetry.
//!
//! For each latent pair the posterior statistics `[μ₁; σ₁; μ₂; σ₂]` drive
//! (1) a per-section softmax over codebook elements, giving one blended
//! algebra element per section, and (2) a per-section on/off prediction
//! relaxed with Gumbel-softmax. Switched section algebras are summed and
//! exponentiated once; with a commuting codebook this equals the product
//! of the per-section exponentials.

use candle_core::{Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::{matrix_exponential, GroupElement, SymmetryCodebook};
use crate::error::{Error, Result};
use crate::nn::{device, log_softmax_last, open_unit, sample_tensor, softmax_last, to_vec, ParamStore, DTYPE};

/// Posterior statistics of a batch of pairs, each field `(P, D)`.
#[derive(Debug, Clone)]
pub struct PairStatistics {
    pub mu1: Tensor,
    pub sigma1: Tensor,
    pub mu2: Tensor,
    pub sigma2: Tensor,
    /// `[μ₁; σ₁; μ₂; σ₂]`, shape `(P, 4D)`.
    pub concat: Tensor,
}

impl PairStatistics {
    pub fn new(mu1: &Tensor, sigma1: &Tensor, mu2: &Tensor, sigma2: &Tensor) -> Result<Self> {
        let promote = |t: &Tensor| -> Result<Tensor> { Ok(if t.rank() == 1 { t.unsqueeze(0)? } else { t.clone() }) };
        let (mu1, sigma1, mu2, sigma2) = (promote(mu1)?, promote(sigma1)?, promote(mu2)?, promote(sigma2)?);
        let shape = mu1.dims().to_vec();
        if shape.len() != 2 || [&sigma1, &mu2, &sigma2].iter().any(|t| t.dims() != shape.as_slice()) {
            return Err(Error::invalid("pair statistics must share one (P, D) shape"));
        }
        for sigma in [&sigma1, &sigma2] {
            if to_vec(sigma)?.iter().any(|s| !(*s > 0.0)) {
                return Err(Error::invalid("posterior standard deviations must be strictly positive"));
            }
        }
        let concat = Tensor::cat(&[&mu1, &sigma1, &mu2, &sigma2], 1)?;
        Ok(Self { mu1, sigma1, mu2, sigma2, concat })
    }

    /// From encoder means and log-variances of the two halves.
    pub fn from_posteriors(mu1: &Tensor, log_var1: &Tensor, mu2: &Tensor, log_var2: &Tensor) -> Result<Self> {
        let sigma1 = (log_var1 * 0.5)?.exp()?;
        let sigma2 = (log_var2 * 0.5)?.exp()?;
        Self::new(mu1, &sigma1, mu2, &sigma2)
    }

    pub fn num_pairs(&self) -> usize {
        self.mu1.dims()[0]
    }

    pub fn latent_dim(&self) -> usize {
        self.mu1.dims()[1]
    }
}

/// Per-section linear heads over `[μ₁; σ₁; μ₂; σ₂]`.
#[derive(Debug, Clone)]
pub struct AttentionHeads {
    num_sections: usize,
    elements_per_section: usize,
    input_dim: usize,
    /// `(S, 4D, SS)`
    pub element_weight: Var,
    /// `(S, SS)`
    pub element_bias: Var,
    /// `(S, 4D, 2)`
    pub section_weight: Var,
    /// `(S, 2)`
    pub section_bias: Var,
}

impl AttentionHeads {
    pub fn init(
        num_sections: usize,
        elements_per_section: usize,
        latent_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let input_dim = 4 * latent_dim;
        let bound = 1.0 / (input_dim as f64).sqrt();
        let dist = rand_distr::Uniform::new_inclusive(-bound, bound).map_err(|e| Error::invalid(e.to_string()))?;
        let mut var = |shape: &[usize]| -> Result<Var> { Ok(Var::from_tensor(&sample_tensor(shape, &dist, rng)?)?) };
        Ok(Self {
            num_sections,
            elements_per_section,
            input_dim,
            element_weight: var(&[num_sections, input_dim, elements_per_section])?,
            element_bias: var(&[num_sections, elements_per_section])?,
            section_weight: var(&[num_sections, input_dim, 2])?,
            section_bias: var(&[num_sections, 2])?,
        })
    }

    /// Heads from explicit tensors; shapes as documented on the fields.
    pub fn from_tensors(
        element_weight: &Tensor,
        element_bias: &Tensor,
        section_weight: &Tensor,
        section_bias: &Tensor,
    ) -> Result<Self> {
        let (s, input_dim, ss) = element_weight.dims3()?;
        if element_bias.dims() != [s, ss]
            || section_weight.dims() != [s, input_dim, 2]
            || section_bias.dims() != [s, 2]
            || input_dim % 4 != 0
        {
            return Err(Error::invalid("inconsistent attention head shapes"));
        }
        Ok(Self {
            num_sections: s,
            elements_per_section: ss,
            input_dim,
            element_weight: Var::from_tensor(element_weight)?,
            element_bias: Var::from_tensor(element_bias)?,
            section_weight: Var::from_tensor(section_weight)?,
            section_bias: Var::from_tensor(section_bias)?,
        })
    }

    pub fn zeros(num_sections: usize, elements_per_section: usize, latent_dim: usize) -> Result<Self> {
        let z = |shape: &[usize]| Tensor::zeros(shape, DTYPE, &device());
        let input_dim = 4 * latent_dim;
        Self::from_tensors(
            &z(&[num_sections, input_dim, elements_per_section])?,
            &z(&[num_sections, elements_per_section])?,
            &z(&[num_sections, input_dim, 2])?,
            &z(&[num_sections, 2])?,
        )
    }

    pub fn register(&self, store: &mut ParamStore, name: &str) -> Result<()> {
        store.insert(format!("{name}.element_weight"), self.element_weight.clone())?;
        store.insert(format!("{name}.element_bias"), self.element_bias.clone())?;
        store.insert(format!("{name}.section_weight"), self.section_weight.clone())?;
        store.insert(format!("{name}.section_bias"), self.section_bias.clone())
    }

    pub fn num_sections(&self) -> usize {
        self.num_sections
    }

    fn check(&self, stats: &PairStatistics) -> Result<()> {
        if stats.concat.dims()[1] != self.input_dim {
            return Err(Error::invalid(format!(
                "pair statistics have width {}, heads expect {}",
                stats.concat.dims()[1],
                self.input_dim
            )));
        }
        Ok(())
    }

    /// `(P, S, k)` logits for a per-section weight `(S, 4D, k)` and bias `(S, k)`.
    fn per_section(stats: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (s, input, k) = weight.dims3()?;
        let p = stats.dims()[0];
        let w = weight.permute((1, 0, 2))?.reshape((input, s * k))?;
        let logits = stats.matmul(&w)?.reshape((p, s, k))?;
        Ok(logits.broadcast_add(&bias.unsqueeze(0)?)?)
    }

    pub fn element_logits(&self, stats: &PairStatistics) -> Result<Tensor> {
        self.check(stats)?;
        Self::per_section(&stats.concat, self.element_weight.as_tensor(), self.element_bias.as_tensor())
    }

    /// Section on/off logits `p_s`, shape `(P, S, 2)`; index 1 is "changed".
    pub fn section_logits(&self, stats: &PairStatistics) -> Result<Tensor> {
        self.check(stats)?;
        Self::per_section(&stats.concat, self.section_weight.as_tensor(), self.section_bias.as_tensor())
    }
}

/// First-step output: attention `(P, S, SS)` and blended algebra `(P, S, D, D)`.
#[derive(Debug, Clone)]
pub struct SectionAlgebra {
    pub attention: Tensor,
    pub algebra: Tensor,
}

pub fn element_attention(
    stats: &PairStatistics,
    heads: &AttentionHeads,
    codebook: &SymmetryCodebook,
) -> Result<SectionAlgebra> {
    if stats.latent_dim() != codebook.latent_dim() {
        return Err(Error::invalid(format!(
            "pair statistics have D={}, codebook has D={}",
            stats.latent_dim(),
            codebook.latent_dim()
        )));
    }
    if heads.num_sections != codebook.num_sections() || heads.elements_per_section != codebook.elements_per_section() {
        return Err(Error::invalid("attention heads do not match the codebook layout"));
    }
    let attention = softmax_last(&heads.element_logits(stats)?)?;
    let (p, s, ss) = attention.dims3()?;
    let d = codebook.latent_dim();
    let gens = codebook.generators().reshape((s, ss, d * d))?;
    let algebra = attention
        .permute((1, 0, 2))?
        .contiguous()?
        .matmul(&gens)?
        .permute((1, 0, 2))?
        .reshape((p, s, d, d))?;
    Ok(SectionAlgebra { attention, algebra })
}

/// Binary change labels `T`, shape `(P, D)` with entries in {0, 1}.
#[derive(Debug, Clone)]
pub struct ChangeTarget {
    pub target: Tensor,
}

impl ChangeTarget {
    pub fn rows(&self) -> Result<Vec<Vec<u8>>> {
        Ok(crate::nn::to_rows(&self.target)?
            .into_iter()
            .map(|r| r.into_iter().map(|v| v as u8).collect())
            .collect())
    }
}

/// `T_i = 1` iff `|μ₁ᵢ - μ₂ᵢ| > threshold`. Computed on detached values.
pub fn change_target(stats: &PairStatistics, threshold: f64) -> Result<ChangeTarget> {
    if !(threshold > 0.0) {
        return Err(Error::invalid(format!("threshold must be > 0, got {threshold}")));
    }
    let diff = (stats.mu1.detach() - stats.mu2.detach())?.abs()?;
    Ok(ChangeTarget { target: diff.gt(threshold)?.to_dtype(DTYPE)? })
}

/// Cross-entropy of each section's 2-way prediction against `T`, summed over
/// sections and averaged over pairs.
pub fn prediction_loss(stats: &PairStatistics, heads: &AttentionHeads, target: &ChangeTarget) -> Result<Tensor> {
    if heads.num_sections != stats.latent_dim() {
        return Err(Error::invalid(format!(
            "section prediction needs |S| = D, got |S|={} D={}",
            heads.num_sections,
            stats.latent_dim()
        )));
    }
    let logits = heads.section_logits(stats)?;
    prediction_loss_from_logits(&logits, &target.target)
}

pub(crate) fn prediction_loss_from_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let log_p = log_softmax_last(logits)?;
    let on = log_p.narrow(2, 1, 1)?.squeeze(2)?;
    let off = log_p.narrow(2, 0, 1)?.squeeze(2)?;
    let off_weight = (target.ones_like()? - target)?;
    let ll = ((on * target)? + (off * off_weight)?)?;
    Ok(ll.sum(1)?.mean(0)?.neg()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SwitchMode {
    /// Relaxed Gumbel-softmax switch used during training.
    Gumbel { temperature: f64 },
    /// `1[p_on >= 0.5]`, no noise; used for symmetry extraction.
    Hard,
}

/// Gumbel noise `-ln(-ln u)` with the given shape.
pub fn gumbel_noise(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| -(-open_unit(rng).ln()).ln()).collect();
    Ok(Tensor::from_vec(data, shape, &device())?)
}

/// Switch value in [0, 1] from 2-way section logits `(..., 2)`.
///
/// With `y = softmax((log p + g) / τ)` a Gumbel-softmax sample, returns
/// `y_on` where `p_on >= 0.5` and `1 - y_off` elsewhere.
pub fn gumbel_switch(section_logits: &Tensor, temperature: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be > 0, got {temperature}")));
    }
    let noise = gumbel_noise(section_logits.dims(), rng)?;
    let log_p = log_softmax_last(section_logits)?;
    let y = softmax_last(&((log_p.clone() + noise)? / temperature)?)?;
    let last = section_logits.rank() - 1;
    let y_on = y.narrow(last, 1, 1)?.squeeze(last)?;
    let y_off = y.narrow(last, 0, 1)?.squeeze(last)?;
    let p_on = log_p.narrow(last, 1, 1)?.squeeze(last)?.exp()?;
    let mask = p_on.ge(0.5)?;
    let off_branch = (y_off.ones_like()? - y_off)?;
    Ok(mask.where_cond(&y_on, &off_branch)?)
}

pub fn hard_switch(section_logits: &Tensor) -> Result<Tensor> {
    let last = section_logits.rank() - 1;
    let p_on = softmax_last(&section_logits.detach())?.narrow(last, 1, 1)?.squeeze(last)?;
    Ok(p_on.ge(0.5)?.to_dtype(DTYPE)?)
}

#[derive(Debug, Clone)]
pub struct CompositeSymmetry {
    /// `(P, S, SS)`, rows on the simplex.
    pub element_attention: Tensor,
    /// `(P, S, 2)`
    pub section_logits: Tensor,
    /// `(P, S)` in [0, 1].
    pub switch_values: Tensor,
    /// Blended per-section algebra `(P, S, D, D)`.
    pub section_algebra: Tensor,
    /// `Σᵢ swᵢ 𝔤_cⁱ`, `(P, D, D)`.
    pub aggregate_algebra: Tensor,
    /// `exp(aggregate_algebra)`, `(P, D, D)`.
    pub group_matrix: Tensor,
}

impl CompositeSymmetry {
    pub fn num_pairs(&self) -> usize {
        self.group_matrix.dims()[0]
    }

    /// `exp(-aggregate_algebra)` for every pair.
    pub fn inverse_matrix(&self) -> Result<Tensor> {
        matrix_exponential(&self.aggregate_algebra.neg()?)
    }

    pub fn pair(&self, index: usize) -> Result<GroupElement> {
        GroupElement::from_algebra(&self.aggregate_algebra.get(index)?)
    }

    /// Applies each pair's group matrix to the matching latent row: `(P, D) -> (P, D)`.
    pub fn act(&self, z: &Tensor) -> Result<Tensor> {
        act_batched(&self.group_matrix, z)
    }

    pub fn act_inverse(&self, z: &Tensor) -> Result<Tensor> {
        act_batched(&self.inverse_matrix()?, z)
    }
}

/// `out[p] = M[p] z[p]` for `M: (P, D, D)`, `z: (P, D)`.
pub fn act_batched(matrices: &Tensor, z: &Tensor) -> Result<Tensor> {
    let (p, d, _) = matrices.dims3()?;
    if z.dims() != [p, d] {
        return Err(Error::invalid(format!("latents {:?} do not match matrices {:?}", z.dims(), matrices.dims())));
    }
    Ok(matrices.matmul(&z.unsqueeze(2)?)?.squeeze(2)?)
}

/// Builds the composite symmetry with exactly one matrix exponential per pair.
pub fn compose(
    codebook: &SymmetryCodebook,
    heads: &AttentionHeads,
    stats: &PairStatistics,
    mode: SwitchMode,
    rng: &mut ChaCha8Rng,
) -> Result<CompositeSymmetry> {
    let SectionAlgebra { attention, algebra } = element_attention(stats, heads, codebook)?;
    let section_logits = heads.section_logits(stats)?;
    let switch_values = match mode {
        SwitchMode::Gumbel { temperature } => gumbel_switch(&section_logits, temperature, rng)?,
        SwitchMode::Hard => hard_switch(&section_logits)?,
    };
    let aggregate_algebra = weighted_section_sum(&switch_values, &algebra)?;
    let group_matrix = matrix_exponential(&aggregate_algebra)?;
    Ok(CompositeSymmetry {
        element_attention: attention,
        section_logits,
        switch_values,
        section_algebra: algebra,
        aggregate_algebra,
        group_matrix,
    })
}

/// `Σᵢ wᵢ Aᵢ` for weights `(P, S)` and matrices `(P, S, D, D)`.
pub fn weighted_section_sum(weights: &Tensor, algebra: &Tensor) -> Result<Tensor> {
    let w = weights.unsqueeze(2)?.unsqueeze(3)?;
    Ok(algebra.broadcast_mul(&w)?.sum(1)?)
}

/// `Πᵢ exp(swᵢ 𝔤_cⁱ)` in section order: one exponential per section.
pub fn product_form_sections(composite: &CompositeSymmetry) -> Result<Tensor> {
    let (_, s, _, _) = composite.section_algebra.dims4()?;
    let scaled = composite
        .section_algebra
        .broadcast_mul(&composite.switch_values.unsqueeze(2)?.unsqueeze(3)?)?;
    let mut acc: Option<Tensor> = None;
    for i in 0..s {
        let factor = matrix_exponential(&scaled.narrow(1, i, 1)?.squeeze(1)?)?;
        acc = Some(match acc {
            None => factor,
            Some(a) => a.matmul(&factor)?,
        });
    }
    acc.ok_or_else(|| Error::invalid("composite has no sections"))
}

/// `Πᵢ Πⱼ exp(swᵢ attnⱼⁱ 𝔤ⱼⁱ)`: one exponential per codebook element, the cost the
/// commutativity shortcut avoids.
pub fn product_form_elements(codebook: &SymmetryCodebook, composite: &CompositeSymmetry) -> Result<Tensor> {
    let (p, s, ss) = composite.element_attention.dims3()?;
    let d = codebook.latent_dim();
    let weights = composite.element_attention.broadcast_mul(&composite.switch_values.unsqueeze(2)?)?;
    let scaled = codebook
        .generators()
        .unsqueeze(0)?
        .broadcast_mul(&weights.reshape((p, s, ss, 1, 1))?)?
        .reshape((p, s * ss, d, d))?;
    let mut acc: Option<Tensor> = None;
    for m in 0..s * ss {
        let factor = matrix_exponential(&scaled.narrow(1, m, 1)?.squeeze(1)?)?;
        acc = Some(match acc {
            None => factor,
            Some(a) => a.matmul(&factor)?,
        });
    }
    acc.ok_or_else(|| Error::invalid("empty codebook"))
}
