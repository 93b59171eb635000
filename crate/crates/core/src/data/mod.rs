//! Datasets with integer ground-truth factors.

mod dsprites;
mod storage;
mod synthetic;

use std::collections::BTreeSet;

use candle_core::Tensor;
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{device, DTYPE};

pub use dsprites::{load_dsprites, load_factor_archive, DSPRITES_FACTOR_NAMES, DSPRITES_FACTOR_SIZES, DSPRITES_LEN};
pub use storage::{load_dataset, save_dataset, Manifest, FACTORS_FILE, FORMAT_TAG, IMAGES_FILE, MANIFEST_FILE};
pub use synthetic::{generate_synthetic, render_shape, RenderWarning, Shape, SyntheticGrid};

/// Pixel storage: quantized bytes with a scale factor, or raw floats.
#[derive(Debug, Clone, PartialEq)]
pub enum Pixels {
    /// `value = byte * scale`.
    Bytes { data: Vec<u8>, scale: f32 },
    Float(Vec<f32>),
}

impl Pixels {
    pub fn len(&self) -> usize {
        match self {
            Pixels::Bytes { data, .. } => data.len(),
            Pixels::Float(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> f32 {
        match self {
            Pixels::Bytes { data, scale } => data[i] as f32 * scale,
            Pixels::Float(v) => v[i],
        }
    }

    fn extend_range(&self, start: usize, len: usize, out: &mut Vec<f64>) {
        match self {
            Pixels::Bytes { data, scale } => {
                out.extend(data[start..start + len].iter().map(|&b| f64::from(b as f32 * scale)))
            }
            Pixels::Float(v) => out.extend(v[start..start + len].iter().map(|&p| f64::from(p))),
        }
    }

    fn select(&self, rows: &[usize], row_len: usize) -> Pixels {
        match self {
            Pixels::Bytes { data, scale } => Pixels::Bytes {
                data: rows.iter().flat_map(|&r| data[r * row_len..(r + 1) * row_len].iter().copied()).collect(),
                scale: *scale,
            },
            Pixels::Float(v) => {
                Pixels::Float(rows.iter().flat_map(|&r| v[r * row_len..(r + 1) * row_len].iter().copied()).collect())
            }
        }
    }
}

/// Images `N x C x H x W` in [0, 1] with one integer factor row per image.
#[derive(Debug, Clone)]
pub struct FactorDataset {
    pixels: Pixels,
    channels: usize,
    height: usize,
    width: usize,
    factors: Vec<u32>,
    factor_sizes: Vec<usize>,
    factor_names: Vec<String>,
    /// True when row `n` sits at the mixed-radix position of its factors and every combination occurs.
    canonical: bool,
}

impl FactorDataset {
    pub fn new(
        pixels: Pixels,
        shape: (usize, usize, usize),
        factors: Vec<u32>,
        factor_sizes: Vec<usize>,
        factor_names: Vec<String>,
    ) -> Result<Self> {
        let (channels, height, width) = shape;
        let f = factor_sizes.len();
        if f == 0 || factor_names.len() != f {
            return Err(Error::invalid("factor names and sizes must be non-empty and of equal length"));
        }
        if factor_sizes.contains(&0) {
            return Err(Error::invalid("factor sizes must be >= 1"));
        }
        let image_len = channels * height * width;
        if image_len == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if factors.len() % f != 0 {
            return Err(Error::invalid("factor table is not a whole number of rows"));
        }
        let n = factors.len() / f;
        if pixels.len() != n * image_len {
            return Err(Error::invalid(format!(
                "{} pixels do not match {n} images of {channels}x{height}x{width}",
                pixels.len()
            )));
        }
        for row in factors.chunks(f) {
            if let Some((k, v)) = row.iter().enumerate().find(|(k, v)| **v as usize >= factor_sizes[*k]) {
                return Err(Error::invalid(format!("factor {k} value {v} out of range {}", factor_sizes[k])));
            }
        }
        let mut ds = Self { pixels, channels, height, width, factors, factor_sizes, factor_names, canonical: false };
        ds.canonical = ds.cartesian_size() == Some(n) && (0..n).all(|i| ds.index_of(ds.factor_row(i)) == Some(i));
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.factors.len() / self.num_factors()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_factors(&self) -> usize {
        self.factor_sizes.len()
    }

    pub fn factor_sizes(&self) -> &[usize] {
        &self.factor_sizes
    }

    pub fn factor_names(&self) -> &[String] {
        &self.factor_names
    }

    /// `(C, H, W)`
    pub fn image_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn pixels(&self) -> &Pixels {
        &self.pixels
    }

    pub fn factor_row(&self, index: usize) -> &[u32] {
        let f = self.num_factors();
        &self.factors[index * f..(index + 1) * f]
    }

    pub fn factors(&self) -> &[u32] {
        &self.factors
    }

    /// Whether every factor combination occurs exactly once in mixed-radix order.
    pub fn is_exhaustive(&self) -> bool {
        self.canonical
    }

    fn cartesian_size(&self) -> Option<usize> {
        self.factor_sizes.iter().try_fold(1usize, |acc, &s| acc.checked_mul(s))
    }

    /// Mixed-radix position of a factor row (last factor fastest). This is the row index
    /// for exhaustive datasets.
    pub fn index_of(&self, row: &[u32]) -> Option<usize> {
        if row.len() != self.num_factors() {
            return None;
        }
        let mut index = 0usize;
        for (&v, &size) in row.iter().zip(&self.factor_sizes) {
            if v as usize >= size {
                return None;
            }
            index = index * size + v as usize;
        }
        Some(index)
    }

    /// Inverse of [`Self::index_of`].
    pub fn factors_of(&self, mut index: usize) -> Vec<u32> {
        let mut row = vec![0u32; self.num_factors()];
        for (slot, &size) in row.iter_mut().zip(&self.factor_sizes).rev() {
            *slot = (index % size) as u32;
            index /= size;
        }
        row
    }

    /// Images at `indices` as an `(n, C, H, W)` tensor.
    pub fn images(&self, indices: &[usize]) -> Result<Tensor> {
        let len = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("image index {i} out of range {}", self.len())));
            }
            self.pixels.extend_range(i * len, len, &mut data);
        }
        Ok(Tensor::from_vec(data, (indices.len(), self.channels, self.height, self.width), &device())?
            .to_dtype(DTYPE)?)
    }

    /// Keeps only `rows`, in the given order.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.len()) {
            return Err(Error::invalid(format!("row {bad} out of range {}", self.len())));
        }
        let f = self.num_factors();
        let factors = rows.iter().flat_map(|&r| self.factors[r * f..(r + 1) * f].iter().copied()).collect();
        Self::new(
            self.pixels.select(rows, self.image_len()),
            self.image_shape(),
            factors,
            self.factor_sizes.clone(),
            self.factor_names.clone(),
        )
    }

    /// Rows whose factors match `query`.
    pub fn matching_rows(&self, query: &FactorQuery) -> Result<Vec<usize>> {
        query.validate(self)?;
        Ok((0..self.len()).filter(|&i| query.matches(self.factor_row(i))).collect())
    }
}

/// Factors held fixed while the rest vary.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorQuery {
    pub fixed_factors: Vec<usize>,
    pub fixed_values: Vec<u32>,
}

impl FactorQuery {
    pub fn new(fixed_factors: Vec<usize>, fixed_values: Vec<u32>) -> Self {
        Self { fixed_factors, fixed_values }
    }

    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self, ds: &FactorDataset) -> Result<()> {
        if self.fixed_factors.len() != self.fixed_values.len() {
            return Err(Error::invalid("fixed factors and values differ in length"));
        }
        let distinct: BTreeSet<_> = self.fixed_factors.iter().collect();
        if distinct.len() != self.fixed_factors.len() {
            return Err(Error::invalid("fixed factor indices must be distinct"));
        }
        for (&f, &v) in self.fixed_factors.iter().zip(&self.fixed_values) {
            if f >= ds.num_factors() {
                return Err(Error::invalid(format!("factor index {f} out of range {}", ds.num_factors())));
            }
            if v as usize >= ds.factor_sizes()[f] {
                return Err(Error::invalid(format!("value {v} out of range for factor {f}")));
            }
        }
        Ok(())
    }

    pub fn matches(&self, row: &[u32]) -> bool {
        self.fixed_factors.iter().zip(&self.fixed_values).all(|(&f, &v)| row[f] == v)
    }
}

/// Draws `n` row indices whose factors match `query`.
///
/// Exhaustive datasets draw each free factor uniformly; otherwise the matching rows
/// are drawn uniformly with replacement.
pub fn sample_indices_with_fixed_factors(
    ds: &FactorDataset,
    query: &FactorQuery,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::invalid("sample count must be >= 1"));
    }
    query.validate(ds)?;
    if ds.is_exhaustive() {
        let mut row = vec![0u32; ds.num_factors()];
        return Ok((0..n)
            .map(|_| {
                for (f, slot) in row.iter_mut().enumerate() {
                    *slot = match query.fixed_factors.iter().position(|&q| q == f) {
                        Some(k) => query.fixed_values[k],
                        None => rng.random_range(0..ds.factor_sizes()[f] as u32),
                    };
                }
                ds.index_of(&row).expect("row within factor ranges")
            })
            .collect());
    }
    let matching = ds.matching_rows(query)?;
    if matching.is_empty() {
        return Err(Error::invalid("no rows match the factor query"));
    }
    Ok((0..n).map(|_| matching[rng.random_range(0..matching.len())]).collect())
}

/// Images and factor rows for `n` draws matching `query`.
pub fn sample_with_fixed_factors(
    ds: &FactorDataset,
    query: &FactorQuery,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<Vec<u32>>)> {
    let rows = sample_indices_with_fixed_factors(ds, query, n, rng)?;
    let factors = rows.iter().map(|&r| ds.factor_row(r).to_vec()).collect();
    Ok((ds.images(&rows)?, factors))
}

/// Random subset of roughly `fraction * N` rows that still covers every value of every factor.
pub fn subsample(ds: &FactorDataset, fraction: f64, rng: &mut ChaCha8Rng) -> Result<FactorDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let n = ds.len();
    let target = ((n as f64 * fraction).round() as usize).clamp(1, n);
    let mut chosen: BTreeSet<usize> = sample(rng, n, target).into_iter().collect();
    // Top up with one row per uncovered factor value.
    for f in 0..ds.num_factors() {
        let mut seen = vec![false; ds.factor_sizes()[f]];
        for &r in &chosen {
            seen[ds.factor_row(r)[f] as usize] = true;
        }
        for (value, _) in seen.iter().enumerate().filter(|(_, s)| !**s) {
            let query = FactorQuery::new(vec![f], vec![value as u32]);
            let pick = sample_indices_with_fixed_factors(ds, &query, 1, rng)?[0];
            chosen.insert(pick);
        }
    }
    let rows: Vec<usize> = chosen.into_iter().collect();
    ds.select(&rows)
}

/// Per-factor sets of values present in the dataset.
pub fn factor_coverage(ds: &FactorDataset) -> Vec<BTreeSet<u32>> {
    (0..ds.num_factors())
        .map(|f| (0..ds.len()).map(|i| ds.factor_row(i)[f]).collect())
        .collect()
}
