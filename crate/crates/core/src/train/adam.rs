//! Adam with bias correction; moments are kept per parameter name.

use std::collections::{BTreeMap, HashMap};

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Updates every parameter that received a gradient. Parameters without one keep
    /// their value and moments.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let AdamConfig { learning_rate, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (name, var) in store.iter() {
            // Gradients carry their backward graph; keeping them in the moments would
            // retain every past step's activations.
            let Some(g) = grads.get(var.as_tensor()).map(Tensor::detach) else { continue };
            let g = &g;
            let m = match self.m.get(name) {
                Some(m) => ((m * beta1)? + (g * (1.0 - beta1))?)?,
                None => (g * (1.0 - beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?,
                None => (g.sqr()? * (1.0 - beta2))?,
            };
            let update = ((&m / c1)? / ((&v / c2)?.sqrt()? + eps)?)?;
            var.set(&(var.as_tensor() - (update * learning_rate)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    /// Moments as `m.<name>` / `v.<name>` tensors.
    pub fn moments(&self) -> HashMap<String, Tensor> {
        let m = self.m.iter().map(|(k, t)| (format!("m.{k}"), t.clone()));
        let v = self.v.iter().map(|(k, t)| (format!("v.{k}"), t.clone()));
        m.chain(v).collect()
    }

    pub fn restore(config: AdamConfig, t: u64, moments: HashMap<String, Tensor>) -> Result<Self> {
        let mut adam = Self::new(config);
        adam.t = t;
        for (key, tensor) in moments {
            match key.split_once('.') {
                Some(("m", name)) => adam.m.insert(name.to_string(), tensor),
                Some(("v", name)) => adam.v.insert(name.to_string(), tensor),
                _ => return Err(Error::invalid(format!("unexpected optimizer entry `{key}`"))),
            };
        }
        Ok(adam)
    }
}
