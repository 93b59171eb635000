//! Training loop, per-step loss log and checkpoints.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::config::RunConfig;
use super::model::{CfaslModel, LossSettings};
use crate::data::FactorDataset;
use crate::equivariance::LossTerm;
use crate::error::{Error, Result};
use crate::nn::scalar;
use crate::vae::make_pair_batch;

pub const LOSS_LOG: &str = "losses.csv";
pub const PARAMS_FILE: &str = "params.safetensors";
pub const OPTIMIZER_FILE: &str = "optimizer.safetensors";
pub const STATE_FILE: &str = "state.json";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const NAN_DUMP: &str = "nan_dump.json";

/// One row of the loss log. Terms that were not computed are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub total: f64,
    pub vae: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub terms: Vec<(LossTerm, Option<f64>)>,
}

impl StepRecord {
    pub fn header() -> Vec<String> {
        let mut h: Vec<String> = ["step", "total", "vae", "reconstruction", "kl"].iter().map(|s| s.to_string()).collect();
        h.extend(LossTerm::ALL.iter().map(|t| t.name().to_string()));
        h
    }

    pub fn fields(&self) -> Vec<String> {
        let mut f = vec![
            self.step.to_string(),
            self.total.to_string(),
            self.vae.to_string(),
            self.reconstruction.to_string(),
            self.kl.to_string(),
        ];
        f.extend(self.terms.iter().map(|(_, v)| v.map_or(String::new(), |v| v.to_string())));
        f
    }

    pub fn term(&self, term: LossTerm) -> Option<f64> {
        self.terms.iter().find(|(t, _)| *t == term).and_then(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointState {
    version: u32,
    step: u64,
    config: RunConfig,
    rng: ChaCha8Rng,
    adam: AdamConfig,
    adam_steps: u64,
}

/// Output directory and open loss log of a run that writes to disk.
#[derive(Debug)]
struct Outputs {
    dir: PathBuf,
    log: csv::Writer<File>,
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: CfaslModel,
    pub dataset: FactorDataset,
    settings: LossSettings,
    adam: Adam,
    rng: ChaCha8Rng,
    step: u64,
    /// `None` keeps everything in memory.
    outputs: Option<Outputs>,
    history: Vec<StepRecord>,
}

fn open_log(dir: &Path, append: bool) -> Result<csv::Writer<File>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(LOSS_LOG);
    let exists = append && path.exists();
    let file = if append {
        OpenOptions::new().create(true).append(true).open(&path)
    } else {
        File::create(&path)
    }
    .map_err(|e| Error::io(&path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if !exists {
        w.write_record(StepRecord::header()).map_err(|e| Error::format(&path, e.to_string()))?;
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(w)
}

impl Trainer {
    /// Builds the dataset from the config and writes outputs under `config.output_dir`.
    pub fn new(config: RunConfig) -> Result<Self> {
        let dataset = config.dataset.load()?;
        let mut t = Self::in_memory(config, dataset)?;
        t.attach_outputs(false)?;
        Ok(t)
    }

    /// Trainer on an already loaded dataset that writes nothing to disk.
    pub fn in_memory(config: RunConfig, dataset: FactorDataset) -> Result<Self> {
        config.validate()?;
        if dataset.len() < config.batch_size {
            return Err(Error::invalid(format!(
                "dataset has {} rows, fewer than batch_size {}",
                dataset.len(),
                config.batch_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = CfaslModel::new(&config, dataset.image_shape(), &mut rng)?;
        let settings = LossSettings::from_config(&config, dataset.len());
        let adam = Adam::new(AdamConfig::new(config.learning_rate));
        Ok(Self { config, model, dataset, settings, adam, rng, step: 0, outputs: None, history: Vec::new() })
    }

    /// Starts writing `losses.csv` and checkpoints under `config.output_dir`.
    pub fn attach_outputs(&mut self, append: bool) -> Result<()> {
        let dir = self.config.output_dir.clone();
        let log = open_log(&dir, append)?;
        let snapshot = dir.join(CONFIG_SNAPSHOT);
        fs::write(&snapshot, self.config.to_toml_string()?).map_err(|e| Error::io(&snapshot, e))?;
        self.outputs = Some(Outputs { dir, log });
        Ok(())
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn history(&self) -> &[StepRecord] {
        &self.history
    }

    pub fn settings(&self) -> &LossSettings {
        &self.settings
    }

    /// One optimizer update on a fresh pair batch.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let rows: Vec<usize> = sample(&mut self.rng, self.dataset.len(), self.config.batch_size).into_vec();
        let images = self.dataset.images(&rows)?;
        let pairs = make_pair_batch(&images, &mut self.rng)?;
        let batch_rows: Vec<usize> = pairs.permutation.iter().map(|&p| rows[p]).collect();
        let losses = match self.model.objective(&pairs.first_half, &pairs.second_half, &self.settings, &mut self.rng) {
            Ok(l) => l,
            Err(Error::NonFinite(what)) => return Err(self.numerical_failure(what, f64::NAN, batch_rows)),
            Err(e) => return Err(e),
        };
        let b = &losses.breakdown;
        let record = StepRecord {
            step: self.step + 1,
            total: b.total_value()?,
            vae: b.vae,
            reconstruction: scalar(&losses.vae.reconstruction)?,
            kl: scalar(&losses.vae.kl)?,
            terms: LossTerm::ALL.iter().map(|&t| (t, b.values.get(&t).copied())).collect(),
        };
        if let Some((loss, value)) = b.non_finite()?.into_iter().next() {
            return Err(self.numerical_failure(loss, value, batch_rows));
        }
        let grads = b.total.backward()?;
        self.adam.step(&self.model.store, &grads)?;
        self.step += 1;
        if let Some(out) = self.outputs.as_mut() {
            let path = out.dir.join(LOSS_LOG);
            out.log.write_record(record.fields()).map_err(|e| Error::format(&path, e.to_string()))?;
            out.log.flush().map_err(|e| Error::io(&path, e))?;
        }
        self.history.push(record.clone());
        Ok(record)
    }

    fn numerical_failure(&self, loss: String, value: f64, batch_indices: Vec<usize>) -> Error {
        if let Some(out) = &self.outputs {
            let dump = serde_json::json!({
                "step": self.step + 1,
                "loss": loss,
                "value": value.to_string(),
                "batch_dataset_rows": batch_indices,
            });
            let path = out.dir.join(NAN_DUMP);
            if let Err(e) = fs::write(&path, dump.to_string()) {
                log::error!("could not write {}: {e}", path.display());
            }
        }
        Error::NumericalFailure { step: self.step + 1, loss, value, batch_indices }
    }

    /// Trains until `config.steps`, checkpointing on the configured cadence and at the end.
    /// With zero steps only the initial checkpoint is written.
    pub fn run(&mut self) -> Result<()> {
        if self.step >= self.config.steps {
            if self.outputs.is_some() {
                self.save_checkpoint()?;
            }
            return Ok(());
        }
        while self.step < self.config.steps {
            let record = self.train_step()?;
            if record.step % 100 == 0 {
                log::info!("step {} total {:.4}", record.step, record.total);
            }
            let due = self.step % self.config.checkpoint_every == 0 || self.step == self.config.steps;
            if due && self.outputs.is_some() {
                self.save_checkpoint()?;
            }
        }
        Ok(())
    }

    /// Writes `checkpoint-<step>` under `dir`.
    pub fn save_checkpoint_to(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("checkpoint-{}", self.step));
        fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        self.model.store.save(&path.join(PARAMS_FILE))?;
        candle_core::safetensors::save(&self.adam.moments(), path.join(OPTIMIZER_FILE))?;
        let state = CheckpointState {
            version: 1,
            step: self.step,
            config: self.config.clone(),
            rng: self.rng.clone(),
            adam: self.adam.config,
            adam_steps: self.adam.steps_taken(),
        };
        let file = path.join(STATE_FILE);
        let json = serde_json::to_string_pretty(&state).map_err(|e| Error::format(&file, e.to_string()))?;
        fs::write(&file, json).map_err(|e| Error::io(&file, e))?;
        Ok(path)
    }

    pub fn save_checkpoint(&self) -> Result<PathBuf> {
        let dir = self.config.output_dir.clone();
        self.save_checkpoint_to(&dir)
    }

    /// Restores a checkpoint. The loss log is appended to unless `output_dir` is redirected.
    pub fn resume(checkpoint: &Path, overrides: impl FnOnce(&mut RunConfig)) -> Result<Self> {
        let state = read_state(checkpoint)?;
        let mut config = state.config;
        overrides(&mut config);
        let dataset = config.dataset.load()?;
        let mut t = Self::restore(checkpoint, config, dataset)?;
        t.attach_outputs(true)?;
        Ok(t)
    }

    /// In-memory restore onto a loaded dataset.
    pub fn restore(checkpoint: &Path, config: RunConfig, dataset: FactorDataset) -> Result<Self> {
        let state = read_state(checkpoint)?;
        let mut t = Self::in_memory(config, dataset)?;
        t.model.store.restore(&load_tensors(&checkpoint.join(PARAMS_FILE))?)?;
        t.adam = Adam::restore(state.adam, state.adam_steps, load_tensors(&checkpoint.join(OPTIMIZER_FILE))?)?;
        t.rng = state.rng;
        t.step = state.step;
        Ok(t)
    }
}

fn read_state(checkpoint: &Path) -> Result<CheckpointState> {
    let file = checkpoint.join(STATE_FILE);
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let state: CheckpointState = serde_json::from_str(&text).map_err(|e| Error::format(&file, e.to_string()))?;
    if state.version != 1 {
        return Err(Error::format(&file, format!("unsupported checkpoint version {}", state.version)));
    }
    Ok(state)
}

fn load_tensors(path: &Path) -> Result<HashMap<String, candle_core::Tensor>> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    candle_core::safetensors::load(path, &crate::nn::device())
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Loads the config and model weights of a checkpoint for evaluation or analysis.
pub fn load_model(checkpoint: &Path) -> Result<(RunConfig, CfaslModel, FactorDataset)> {
    let state = read_state(checkpoint)?;
    let config = state.config;
    let dataset = config.dataset.load()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = CfaslModel::new(&config, dataset.image_shape(), &mut rng)?;
    model.store.restore(&load_tensors(&checkpoint.join(PARAMS_FILE))?)?;
    Ok((config, model, dataset))
}

/// Checkpoint step from its `state.json`.
pub fn checkpoint_step(checkpoint: &Path) -> Result<u64> {
    Ok(read_state(checkpoint)?.step)
}
