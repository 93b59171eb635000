//! The full model: VAE, symmetry codebook and attention heads, plus one-step objective.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use crate::codebook::{
    commutativity_loss, parallel_loss_from_changes, perpendicular_loss_from_changes, same_section_pairs,
    sparsity_loss_from_changes, ParallelForm, PerpForm, PerpSampling, SymmetryCodebook,
};
use crate::composition::{
    change_target, compose, prediction_loss, AttentionHeads, CompositeSymmetry, PairStatistics, SwitchMode,
};
use crate::data::FactorDataset;
use crate::equivariance::{
    decoder_equiv_loss, encoder_equiv_loss, total_objective, AblationMask, LossBreakdown, LossComponents, LossTerm,
    LossWeights,
};
use crate::error::{Error, Result};
use crate::metrics::TableEncoder;
use crate::nn::{to_rows, ParamStore};
use crate::vae::{ConvVae, EncoderOutput, ObjectiveConfig, VaeArchitecture, VaeLoss};

/// Everything the per-step objective needs besides parameters.
#[derive(Debug, Clone)]
pub struct LossSettings {
    pub objective: ObjectiveConfig,
    pub weights: LossWeights,
    pub mask: AblationMask,
    pub threshold: f64,
    pub temperature: f64,
    pub pair_budget: usize,
    pub perp_pairs_per_step: usize,
    pub perp_form: PerpForm,
}

impl LossSettings {
    pub fn from_config(config: &RunConfig, dataset_len: usize) -> Self {
        Self {
            objective: config.objective_for(dataset_len),
            weights: config.weights(),
            mask: config.ablation.clone(),
            threshold: config.threshold,
            temperature: config.gumbel_temperature,
            pair_budget: config.pair_budget,
            perp_pairs_per_step: config.perp_pairs_per_step,
            perp_form: config.perp_form,
        }
    }
}

/// Result of evaluating the objective on one pair batch.
#[derive(Debug, Clone)]
pub struct StepLosses {
    pub breakdown: LossBreakdown,
    pub vae: VaeLoss,
}

#[derive(Debug, Clone)]
pub struct CfaslModel {
    pub store: ParamStore,
    pub vae: ConvVae,
    pub codebook: SymmetryCodebook,
    pub heads: AttentionHeads,
}

impl CfaslModel {
    pub fn new(config: &RunConfig, image_shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Result<Self> {
        let (channels, h, w) = image_shape;
        if h != w {
            return Err(Error::invalid("images must be square"));
        }
        let cb = config.codebook;
        let mut store = ParamStore::new();
        let arch = VaeArchitecture { image_size: h, channels, latent_dim: cb.latent_dim };
        let vae = ConvVae::new(arch, &mut store, rng)?;
        let codebook =
            SymmetryCodebook::init_with_rng(cb.sections, cb.elements_per_section, cb.latent_dim, cb.init_scale, rng)?;
        codebook.register(&mut store, "codebook")?;
        let heads = AttentionHeads::init(cb.sections, cb.elements_per_section, cb.latent_dim, rng)?;
        heads.register(&mut store, "heads")?;
        Ok(Self { store, vae, codebook, heads })
    }

    pub fn latent_dim(&self) -> usize {
        self.vae.latent_dim()
    }

    /// Posterior statistics for the two halves of a pair batch.
    pub fn pair_statistics(&self, out: &EncoderOutput, pairs: usize) -> Result<PairStatistics> {
        let first = out.narrow(0, pairs)?;
        let second = out.narrow(pairs, pairs)?;
        PairStatistics::from_posteriors(&first.mu, &first.log_var, &second.mu, &second.log_var)
    }

    /// Composite symmetry for each `(x1, x2)` pair from posterior means.
    pub fn extract(&self, x1: &Tensor, x2: &Tensor, mode: SwitchMode, rng: &mut ChaCha8Rng) -> Result<CompositeSymmetry> {
        let a = self.vae.encode(x1)?;
        let b = self.vae.encode(x2)?;
        let stats = PairStatistics::from_posteriors(&a.mu, &a.log_var, &b.mu, &b.log_var)?;
        compose(&self.codebook, &self.heads, &stats, mode, rng)
    }

    /// Full objective for pairs `(first[k], second[k])`.
    ///
    /// Disabled terms are skipped entirely, so a fully masked run is plain VAE training.
    pub fn objective(
        &self,
        first: &Tensor,
        second: &Tensor,
        settings: &LossSettings,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepLosses> {
        let pairs = first.dims()[0];
        if second.dims() != first.dims() || pairs == 0 {
            return Err(Error::invalid("pair halves must be non-empty and equally shaped"));
        }
        let x = Tensor::cat(&[first, second], 0)?;
        let out = self.vae.encode(&x)?;
        let z = ConvVae::reparameterize(&out, rng)?;
        let logits = self.vae.decode_logits(&z)?;
        let vae = settings.objective.loss(&x, &logits, &out, &z)?;
        let mut components = LossComponents::new(vae.total.clone());

        let mask = &settings.mask;
        let on = |t: LossTerm| mask.is_enabled(t);
        if mask.any_enabled() {
            let stats = self.pair_statistics(&out, pairs)?;
            let mu1 = stats.mu1.clone();
            let mu2 = stats.mu2.clone();
            if on(LossTerm::Parallel) || on(LossTerm::Perpendicular) || on(LossTerm::Sparsity) {
                // Codebook shaping acts on detached first-element means.
                let changes = self.codebook.latent_changes(&mu1.detach())?;
                let cb = &self.codebook;
                if on(LossTerm::Parallel) {
                    let idx = same_section_pairs(cb.num_sections(), cb.elements_per_section(), settings.pair_budget, rng);
                    components = components
                        .with(LossTerm::Parallel, parallel_loss_from_changes(&changes, &idx, ParallelForm::NegLogCos)?);
                }
                if on(LossTerm::Perpendicular) {
                    let sampling = PerpSampling::PerSectionPair(settings.perp_pairs_per_step);
                    let loss = perpendicular_loss_from_changes(&changes, sampling, settings.perp_form, rng)?;
                    components = components.with(LossTerm::Perpendicular, loss);
                }
                if on(LossTerm::Sparsity) {
                    components = components.with(LossTerm::Sparsity, sparsity_loss_from_changes(&changes)?);
                }
            }
            if on(LossTerm::Commutative) {
                components = components.with(LossTerm::Commutative, commutativity_loss(&self.codebook)?);
            }
            if on(LossTerm::Prediction) {
                let target = change_target(&stats, settings.threshold)?;
                components = components.with(LossTerm::Prediction, prediction_loss(&stats, &self.heads, &target)?);
            }
            if on(LossTerm::EncoderEquiv) || on(LossTerm::DecoderEquiv) {
                let mode = SwitchMode::Gumbel { temperature: settings.temperature };
                let g = compose(&self.codebook, &self.heads, &stats, mode, rng)?;
                if on(LossTerm::EncoderEquiv) {
                    components = components.with(LossTerm::EncoderEquiv, encoder_equiv_loss(&mu1, &mu2, &g)?);
                }
                if on(LossTerm::DecoderEquiv) {
                    let loss = decoder_equiv_loss(second, &mu1, &g, |z| self.vae.decode(z))?;
                    components = components.with(LossTerm::DecoderEquiv, loss);
                }
            }
        }
        let breakdown = total_objective(&components, &settings.weights, mask)?;
        Ok(StepLosses { breakdown, vae })
    }

    /// Posterior means of every dataset row, as a metric encoder.
    pub fn encode_dataset(&self, ds: &FactorDataset) -> Result<TableEncoder> {
        const CHUNK: usize = 256;
        let mut rows = Vec::with_capacity(ds.len());
        let all: Vec<usize> = (0..ds.len()).collect();
        for chunk in all.chunks(CHUNK) {
            let out = self.vae.encode(&ds.images(chunk)?)?;
            rows.extend(to_rows(&out.mu)?);
        }
        TableEncoder::new(rows)
    }
}
