//! Parameter storage and the few layers the VAE needs.
//!
//! Everything is `f64` on the CPU device. Parameters are initialised from
//! an explicit ChaCha stream rather than candle's thread RNG so that runs
//! are reproducible from the config seed alone.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

pub const DTYPE: DType = DType::F64;

pub fn device() -> Device {
    Device::Cpu
}

/// Named trainable parameters, iterated in name order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) -> Result<()> {
        let name = name.into();
        if self.vars.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.vars.insert(name, var);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Copies the current value of every parameter into a plain map.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_detached_tensor().copy().expect("cpu copy")))
            .collect()
    }

    /// Overwrites parameters in place from `values`; every stored name must be present.
    pub fn restore(&self, values: &std::collections::HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let value = values
                .get(name)
                .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))?;
            if value.dims() != var.dims() {
                return Err(Error::invalid(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    value.dims(),
                    var.dims()
                )));
            }
            var.set(&value.to_dtype(DTYPE)?)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: std::collections::HashMap<String, Tensor> = self.snapshot().into_iter().collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }
}

/// Draws a tensor with i.i.d. entries from `dist`.
pub fn sample_tensor<D: Distribution<f64>>(
    shape: &[usize],
    dist: &D,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Ok(Tensor::from_vec(data, shape, &device())?)
}

pub fn normal_tensor(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if std == 0.0 {
        return Ok(Tensor::zeros(shape, DTYPE, &device())?);
    }
    let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
    sample_tensor(shape, &dist, rng)
}

fn uniform_var(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
    let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(Var::from_tensor(&sample_tensor(shape, &dist, rng)?)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    /// Weight is stored as `(in, out)` so the forward pass is a plain matmul.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = uniform_var(&[in_dim, out_dim], bound, rng)?;
        let bias = uniform_var(&[out_dim], bound, rng)?;
        store.insert(format!("{name}.weight"), weight.clone())?;
        store.insert(format!("{name}.bias"), bias.clone())?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(self.weight.as_tensor())?.broadcast_add(self.bias.as_tensor())?)
    }
}

/// 4x4 kernel, stride 2, padding 1: halves the spatial size.
#[derive(Debug, Clone)]
pub struct DownConv {
    weight: Var,
    bias: Var,
}

impl DownConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_ch * 16) as f64).sqrt();
        let weight = uniform_var(&[out_ch, in_ch, 4, 4], bound, rng)?;
        let bias = uniform_var(&[out_ch], bound, rng)?;
        store.insert(format!("{name}.weight"), weight.clone())?;
        store.insert(format!("{name}.bias"), bias.clone())?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), 1, 2, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, (), 1, 1))?)?)
    }
}

/// Transposed counterpart of [`DownConv`]: doubles the spatial size.
#[derive(Debug, Clone)]
pub struct UpConv {
    weight: Var,
    bias: Var,
}

impl UpConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = 1.0 / ((out_ch * 16) as f64).sqrt();
        let weight = uniform_var(&[in_ch, out_ch, 4, 4], bound, rng)?;
        let bias = uniform_var(&[out_ch], bound, rng)?;
        store.insert(format!("{name}.weight"), weight.clone())?;
        store.insert(format!("{name}.bias"), bias.clone())?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(self.weight.as_tensor(), 1, 0, 2, 1)?;
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, (), 1, 1))?)?)
    }
}

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((pos + tail)?)
}

/// `exp(-softplus(-x))`, built from differentiable primitives.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(softplus(&x.neg()?)?.neg()?.exp()?)
}

/// Log-softmax over the last axis. The shift by the row maximum is detached; it cancels
/// exactly, so the gradient is unaffected.
pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let last = x.rank() - 1;
    let shifted = x.broadcast_sub(&x.max_keepdim(last)?.detach())?;
    let log_norm = shifted.exp()?.sum_keepdim(last)?.log()?;
    Ok(shifted.broadcast_sub(&log_norm)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(log_softmax_last(x)?.exp()?)
}

/// Copies a tensor of any rank to a flat host vector.
pub fn to_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DTYPE)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DTYPE)?.to_scalar::<f64>()?)
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("ragged rows"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Tensor::from_vec(flat, (n, d), &device())?)
}

pub fn to_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DTYPE)?.to_vec2::<f64>()?)
}

/// Square matrix with `values` on the diagonal.
pub fn diag(values: &[f64]) -> Result<Tensor> {
    let n = values.len();
    let mut data = vec![0.0; n * n];
    for (i, v) in values.iter().enumerate() {
        data[i * n + i] = *v;
    }
    Ok(Tensor::from_vec(data, (n, n), &device())?)
}

/// Uniform draw in the open interval (0, 1).
pub(crate) fn open_unit(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn conv_shapes_halve_and_double() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let down = DownConv::new(&mut store, "d", 1, 4, &mut rng).unwrap();
        let up = UpConv::new(&mut store, "u", 4, 1, &mut rng).unwrap();
        let x = Tensor::zeros((2, 1, 16, 16), DTYPE, &device()).unwrap();
        let h = down.forward(&x).unwrap();
        assert_eq!(h.dims(), &[2, 4, 8, 8]);
        assert_eq!(up.forward(&h).unwrap().dims(), &[2, 1, 16, 16]);
        assert_eq!(store.len(), 4);
    }

    #[test]
    fn softplus_is_stable() {
        let x = Tensor::new(&[-800.0f64, 0.0, 800.0], &device()).unwrap();
        let y = to_vec(&softplus(&x).unwrap()).unwrap();
        assert!(y[0] >= 0.0 && y[0] < 1e-300);
        assert!((y[1] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(y[2], 800.0);
    }

    #[test]
    fn softmax_family_matches_closed_form_and_differentiates() {
        let x = Var::new(&[[1.0f64, -2.0, 0.5], [700.0, 701.0, 699.0]], &device()).unwrap();
        let p = to_rows(&softmax_last(x.as_tensor()).unwrap()).unwrap();
        for (row, probs) in [[1.0f64, -2.0, 0.5], [700.0, 701.0, 699.0]].iter().zip(&p) {
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for (v, q) in row.iter().zip(probs) {
                assert!(((v - m).exp() / z - q).abs() < 1e-15);
            }
        }
        // d/dx_j of Σ_i w_i softmax_i = p_j (w_j - Σ_i w_i p_i)
        let w = Tensor::new(&[[0.3f64, -1.0, 2.0], [1.0, 0.0, -1.0]], &device()).unwrap();
        let loss = softmax_last(x.as_tensor()).unwrap().mul(&w).unwrap().sum_all().unwrap();
        let g = to_rows(loss.backward().unwrap().get(x.as_tensor()).unwrap()).unwrap();
        let w = to_rows(&w).unwrap();
        for r in 0..2 {
            let mean: f64 = (0..3).map(|i| w[r][i] * p[r][i]).sum();
            for j in 0..3 {
                assert!((g[r][j] - p[r][j] * (w[r][j] - mean)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sigmoid_gradient() {
        let x = Var::new(&[-30.0f64, -1.0, 0.0, 2.0, 40.0], &device()).unwrap();
        let y = sigmoid(x.as_tensor()).unwrap();
        let s = to_vec(&y).unwrap();
        let g = to_vec(y.sum_all().unwrap().backward().unwrap().get(x.as_tensor()).unwrap()).unwrap();
        for (i, v) in [-30.0f64, -1.0, 0.0, 2.0, 40.0].iter().enumerate() {
            let want = 1.0 / (1.0 + (-v).exp());
            assert!((s[i] - want).abs() < 1e-15);
            assert!((g[i] - want * (1.0 - want)).abs() < 1e-15);
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        let v = Var::zeros(1, DTYPE, &device()).unwrap();
        store.insert("a", v.clone()).unwrap();
        assert!(store.insert("a", v).is_err());
    }
}
