//! Encoder/decoder equivariance losses and the weighted, maskable total objective.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::composition::CompositeSymmetry;
use crate::error::{Error, Result};
use crate::nn::scalar;

/// Default weight on the decoder equivariance term.
pub const DEFAULT_EPSILON: f64 = 0.1;

/// `mean((z1 - g⁻¹ z2)²)` with `g⁻¹ = exp(-aggregate_algebra)`, over `(P, D)` latents.
pub fn encoder_equiv_loss(z1: &Tensor, z2: &Tensor, g: &CompositeSymmetry) -> Result<Tensor> {
    if z1.dims() != z2.dims() {
        return Err(Error::invalid(format!("latents {:?} and {:?} differ in shape", z1.dims(), z2.dims())));
    }
    let pulled_back = g.act_inverse(z2)?;
    Ok((z1 - pulled_back)?.sqr()?.mean_all()?)
}

/// `mean((decode(g z1) - x2)²)`; `decode` maps `(P, D)` latents to images in [0, 1].
pub fn decoder_equiv_loss<F>(x2: &Tensor, z1: &Tensor, g: &CompositeSymmetry, decode: F) -> Result<Tensor>
where
    F: FnOnce(&Tensor) -> Result<Tensor>,
{
    let images = decode(&g.act(z1)?)?;
    if images.dims() != x2.dims() {
        return Err(Error::invalid(format!("decoded {:?} does not match targets {:?}", images.dims(), x2.dims())));
    }
    Ok((images - x2)?.sqr()?.mean_all()?)
}

/// Every regularizer added on top of the VAE objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Parallel,
    Perpendicular,
    Sparsity,
    Commutative,
    Prediction,
    EncoderEquiv,
    DecoderEquiv,
}

impl LossTerm {
    pub const ALL: [LossTerm; 7] = [
        LossTerm::Parallel,
        LossTerm::Perpendicular,
        LossTerm::Sparsity,
        LossTerm::Commutative,
        LossTerm::Prediction,
        LossTerm::EncoderEquiv,
        LossTerm::DecoderEquiv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Parallel => "parallel",
            LossTerm::Perpendicular => "perpendicular",
            LossTerm::Sparsity => "sparsity",
            LossTerm::Commutative => "commutative",
            LossTerm::Prediction => "prediction",
            LossTerm::EncoderEquiv => "encoder_equiv",
            LossTerm::DecoderEquiv => "decoder_equiv",
        }
    }

    /// Short ablation label.
    pub fn label(self) -> &'static str {
        match self {
            LossTerm::Parallel => "pl",
            LossTerm::Perpendicular => "pd",
            LossTerm::Sparsity => "s",
            LossTerm::Commutative => "c",
            LossTerm::Prediction => "p",
            LossTerm::EncoderEquiv => "ee",
            LossTerm::DecoderEquiv => "de",
        }
    }

    /// Resolves a mask key to the terms it controls; `e`/`equiv` covers both equivariance terms.
    pub fn parse_key(key: &str) -> Result<Vec<LossTerm>> {
        if matches!(key, "e" | "equiv" | "equivariance") {
            return Ok(vec![LossTerm::EncoderEquiv, LossTerm::DecoderEquiv]);
        }
        LossTerm::ALL
            .into_iter()
            .find(|t| t.name() == key || t.label() == key)
            .map(|t| vec![t])
            .ok_or_else(|| {
                let valid: Vec<&str> = LossTerm::ALL.iter().map(|t| t.label()).collect();
                Error::invalid(format!("unknown loss name `{key}`; expected one of e, {}", valid.join(", ")))
            })
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Set of enabled regularizers. Serialized as a map of loss name to on/off; names
/// missing from the map stay enabled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, bool>", into = "BTreeMap<String, bool>")]
pub struct AblationMask {
    enabled: BTreeSet<LossTerm>,
}

impl Default for AblationMask {
    fn default() -> Self {
        Self::all_on()
    }
}

impl AblationMask {
    pub fn all_on() -> Self {
        Self { enabled: LossTerm::ALL.into_iter().collect() }
    }

    pub fn all_off() -> Self {
        Self { enabled: BTreeSet::new() }
    }

    pub fn is_enabled(&self, term: LossTerm) -> bool {
        self.enabled.contains(&term)
    }

    pub fn set(&mut self, term: LossTerm, on: bool) {
        if on {
            self.enabled.insert(term);
        } else {
            self.enabled.remove(&term);
        }
    }

    pub fn with(mut self, term: LossTerm, on: bool) -> Self {
        self.set(term, on);
        self
    }

    pub fn enabled(&self) -> impl Iterator<Item = LossTerm> + '_ {
        self.enabled.iter().copied()
    }

    pub fn any_enabled(&self) -> bool {
        !self.enabled.is_empty()
    }

    /// Applies `key = on` updates on top of the all-on mask. Grouped keys are applied
    /// before single-term keys so `e = false, de = true` keeps the decoder term.
    pub fn from_map(map: &BTreeMap<String, bool>) -> Result<Self> {
        let mut mask = Self::all_on();
        let mut singles = Vec::new();
        for (key, &on) in map {
            let terms = LossTerm::parse_key(key)?;
            if terms.len() > 1 {
                terms.into_iter().for_each(|t| mask.set(t, on));
            } else {
                singles.push((terms[0], on));
            }
        }
        singles.into_iter().for_each(|(t, on)| mask.set(t, on));
        Ok(mask)
    }

    /// Builds a mask from the six table switches `(p, c, e, pl, pd, s)`.
    pub fn from_switches(p: bool, c: bool, e: bool, pl: bool, pd: bool, s: bool) -> Self {
        Self::all_off()
            .with(LossTerm::Prediction, p)
            .with(LossTerm::Commutative, c)
            .with(LossTerm::EncoderEquiv, e)
            .with(LossTerm::DecoderEquiv, e)
            .with(LossTerm::Parallel, pl)
            .with(LossTerm::Perpendicular, pd)
            .with(LossTerm::Sparsity, s)
    }

    /// The eight ablation rows, from the plain VAE to the full objective.
    pub fn ablation_rows() -> Vec<(&'static str, AblationMask)> {
        vec![
            ("base", Self::from_switches(false, false, false, false, false, false)),
            ("without_p", Self::from_switches(false, true, true, true, true, true)),
            ("without_e", Self::from_switches(true, true, false, true, true, true)),
            ("without_pl", Self::from_switches(true, true, true, false, true, true)),
            ("without_pd", Self::from_switches(true, true, true, true, false, true)),
            ("without_pl_pd_s", Self::from_switches(true, true, true, false, false, false)),
            ("without_s", Self::from_switches(true, true, true, true, true, false)),
            ("full", Self::all_on()),
        ]
    }
}

impl TryFrom<BTreeMap<String, bool>> for AblationMask {
    type Error = Error;

    fn try_from(map: BTreeMap<String, bool>) -> Result<Self> {
        Self::from_map(&map)
    }
}

impl From<AblationMask> for BTreeMap<String, bool> {
    fn from(mask: AblationMask) -> Self {
        LossTerm::ALL.into_iter().map(|t| (t.label().to_string(), mask.is_enabled(t))).collect()
    }
}

/// Per-term weights. Everything defaults to 1 except the decoder term, which uses `epsilon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub epsilon: f64,
    #[serde(default)]
    pub overrides: BTreeMap<LossTerm, f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { epsilon: DEFAULT_EPSILON, overrides: BTreeMap::new() }
    }
}

impl LossWeights {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self { epsilon, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        for (term, w) in &self.overrides {
            if !w.is_finite() {
                return Err(Error::invalid(format!("weight for {term} is not finite")));
            }
        }
        Ok(())
    }

    pub fn weight(&self, term: LossTerm) -> f64 {
        let base = self.overrides.get(&term).copied().unwrap_or(1.0);
        if term == LossTerm::DecoderEquiv {
            base * self.epsilon
        } else {
            base
        }
    }
}

/// Unweighted loss values for one step. Terms that were not computed are absent.
#[derive(Debug, Clone)]
pub struct LossComponents {
    pub vae: Tensor,
    pub terms: BTreeMap<LossTerm, Tensor>,
}

impl LossComponents {
    pub fn new(vae: Tensor) -> Self {
        Self { vae, terms: BTreeMap::new() }
    }

    pub fn with(mut self, term: LossTerm, value: Tensor) -> Self {
        self.terms.insert(term, value);
        self
    }
}

#[derive(Debug, Clone)]
pub struct LossBreakdown {
    /// Differentiable total.
    pub total: Tensor,
    pub vae: f64,
    /// Raw value of every computed term, masked or not.
    pub values: BTreeMap<LossTerm, f64>,
    /// Effective weight per term: zero when masked out.
    pub weights: BTreeMap<LossTerm, f64>,
}

impl LossBreakdown {
    pub fn total_value(&self) -> Result<f64> {
        scalar(&self.total)
    }

    pub fn value(&self, term: LossTerm) -> f64 {
        self.values.get(&term).copied().unwrap_or(0.0)
    }

    pub fn weight_map(&self) -> BTreeMap<String, f64> {
        self.weights.iter().map(|(t, w)| (t.name().to_string(), *w)).collect()
    }

    /// Names of non-finite components, `total` included.
    pub fn non_finite(&self) -> Result<Vec<(String, f64)>> {
        let mut bad = Vec::new();
        if !self.vae.is_finite() {
            bad.push(("vae".to_string(), self.vae));
        }
        for (t, v) in &self.values {
            if !v.is_finite() {
                bad.push((t.name().to_string(), *v));
            }
        }
        let total = self.total_value()?;
        if !total.is_finite() {
            bad.push(("total".to_string(), total));
        }
        Ok(bad)
    }
}

/// `vae + Σ mask·weight·term`. Enabled terms must be present in `components`.
pub fn total_objective(components: &LossComponents, weights: &LossWeights, mask: &AblationMask) -> Result<LossBreakdown> {
    weights.validate()?;
    let mut total = components.vae.clone();
    let mut values = BTreeMap::new();
    let mut effective = BTreeMap::new();
    for term in LossTerm::ALL {
        let w = if mask.is_enabled(term) { weights.weight(term) } else { 0.0 };
        effective.insert(term, w);
        match components.terms.get(&term) {
            Some(t) => {
                values.insert(term, scalar(t)?);
                if w != 0.0 {
                    total = (total + (t * w)?)?;
                }
            }
            None if w != 0.0 => {
                return Err(Error::invalid(format!("loss term {term} is enabled but was not computed")));
            }
            None => {}
        }
    }
    Ok(LossBreakdown { total, vae: scalar(&components.vae)?, values, weights: effective })
}
