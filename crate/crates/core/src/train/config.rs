//! Run configuration, loadable from TOML.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::PerpForm;
use crate::data::{generate_synthetic, load_dataset, load_dsprites, subsample, FactorDataset, SyntheticGrid};
use crate::equivariance::{AblationMask, LossTerm, LossWeights, DEFAULT_EPSILON};
use crate::error::{Error, Result};
use crate::vae::{ObjectiveConfig, ObjectiveKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic {
        #[serde(default = "desk_grid")]
        grid: SyntheticGrid,
        #[serde(default = "default_image_size")]
        image_size: usize,
    },
    /// A directory in the manifest + flat binary format.
    Directory { path: PathBuf },
    Dsprites {
        path: PathBuf,
        /// Keep this fraction of rows (coverage preserving).
        #[serde(default)]
        subsample: Option<f64>,
        #[serde(default)]
        subsample_seed: u64,
    },
}

fn desk_grid() -> SyntheticGrid {
    SyntheticGrid::DESK
}

fn default_image_size() -> usize {
    16
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic { grid: SyntheticGrid::DESK, image_size: 16 }
    }
}

impl DatasetSpec {
    pub fn load(&self) -> Result<FactorDataset> {
        match self {
            DatasetSpec::Synthetic { grid, image_size } => {
                let (ds, warnings) = generate_synthetic(grid, *image_size, 0)?;
                for w in warnings {
                    log::warn!("image {}: {}", w.index, w.message);
                }
                Ok(ds)
            }
            DatasetSpec::Directory { path } => Ok(load_dataset(path)?.0),
            DatasetSpec::Dsprites { path, subsample: fraction, subsample_seed } => {
                let ds = load_dsprites(path)?;
                match fraction {
                    Some(f) => subsample(&ds, *f, &mut ChaCha8Rng::seed_from_u64(*subsample_seed)),
                    None => Ok(ds),
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodebookConfig {
    pub sections: usize,
    pub elements_per_section: usize,
    pub latent_dim: usize,
    /// Generator entries start with std `init_scale / latent_dim`.
    pub init_scale: f64,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self { sections: 10, elements_per_section: 10, latent_dim: 10, init_scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epsilon: f64,
    pub threshold: f64,
    pub gumbel_temperature: f64,
    pub checkpoint_every: u64,
    pub output_dir: PathBuf,
    /// Same-section pairs per section when a section exceeds the exhaustive limit.
    pub pair_budget: usize,
    /// Element pairs drawn per unordered section pair for the perpendicular loss.
    pub perp_pairs_per_step: usize,
    pub perp_form: PerpForm,
    /// Optional per-term weight multipliers.
    pub loss_weights: BTreeMap<LossTerm, f64>,
    pub dataset: DatasetSpec,
    pub objective: ObjectiveConfig,
    pub codebook: CodebookConfig,
    pub ablation: AblationMask,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            steps: 1000,
            batch_size: 64,
            learning_rate: 1e-4,
            epsilon: DEFAULT_EPSILON,
            threshold: 0.5,
            gumbel_temperature: 1e-4,
            checkpoint_every: 1000,
            output_dir: PathBuf::from("runs/default"),
            pair_budget: 16,
            perp_pairs_per_step: 1,
            perp_form: PerpForm::CosSq,
            loss_weights: BTreeMap::new(),
            dataset: DatasetSpec::default(),
            objective: ObjectiveConfig::default(),
            codebook: CodebookConfig::default(),
            ablation: AblationMask::all_on(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::invalid(format!("batch_size must be even and >= 2, got {}", self.batch_size)));
        }
        let cb = &self.codebook;
        if cb.sections != cb.latent_dim {
            return Err(Error::invalid(format!(
                "codebook sections ({}) must equal latent_dim ({})",
                cb.sections, cb.latent_dim
            )));
        }
        if cb.sections == 0 || cb.elements_per_section == 0 {
            return Err(Error::invalid("codebook sizes must be positive"));
        }
        if cb.sections < 2 && self.ablation.is_enabled(LossTerm::Perpendicular) {
            return Err(Error::invalid("the perpendicular loss needs at least two sections"));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("threshold", self.threshold),
            ("gumbel_temperature", self.gumbel_temperature),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        if self.checkpoint_every == 0 || self.pair_budget == 0 || self.perp_pairs_per_step == 0 {
            return Err(Error::invalid("checkpoint_every, pair_budget and perp_pairs_per_step must be >= 1"));
        }
        self.weights().validate()?;
        let mut objective = self.objective;
        objective.dataset_size.get_or_insert(self.batch_size);
        objective.validate()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { epsilon: self.epsilon, overrides: self.loss_weights.clone() }
    }

    /// Objective with `dataset_size` filled in when the TC estimator needs it.
    pub fn objective_for(&self, dataset_len: usize) -> ObjectiveConfig {
        let mut o = self.objective;
        if o.kind == ObjectiveKind::BetaTcvae && o.dataset_size.is_none() {
            o.dataset_size = Some(dataset_len);
        }
        o
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_protocol() {
        let c = RunConfig::default();
        assert_eq!((c.learning_rate, c.batch_size, c.epsilon, c.threshold, c.gumbel_temperature), (1e-4, 64, 0.1, 0.5, 1e-4));
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = RunConfig::default();
        let text = c.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
        let partial = RunConfig::from_toml_str("steps = 5\n[ablation]\ne = false\n").unwrap();
        assert_eq!(partial.steps, 5);
        assert!(!partial.ablation.is_enabled(LossTerm::DecoderEquiv));
        assert!(partial.ablation.is_enabled(LossTerm::Sparsity));
    }

    #[test]
    fn validation() {
        let odd = RunConfig { batch_size: 63, ..RunConfig::default() };
        assert!(odd.validate().is_err());
        let mut mismatch = RunConfig::default();
        mismatch.codebook.sections = 4;
        assert!(mismatch.validate().is_err());
        assert!(RunConfig::from_toml_str("[ablation]\nbogus = true\n").is_err());
        assert!(RunConfig::from_toml_str("epsilon = -1.0\n").is_err());
    }
}
