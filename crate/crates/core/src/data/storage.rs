//! On-disk dataset directory: `manifest.json`, `images.f32`, `factors.i32`.
//!
//! `images.f32` holds `N*C*H*W` little-endian f32 values in row-major
//! `(n, c, h, w)` order. `factors.i32` holds `N*F` little-endian i32 values,
//! one row of factor indices per image.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FactorDataset, Pixels};
use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "cfasl-factor-dataset";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGES_FILE: &str = "images.f32";
pub const FACTORS_FILE: &str = "factors.i32";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub num_images: usize,
    pub channels: usize,
    pub image_size: usize,
    pub factor_names: Vec<String>,
    pub factor_sizes: Vec<usize>,
    pub seed: u64,
    /// Free-form provenance, e.g. the generating grid.
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl Manifest {
    pub fn describe(ds: &FactorDataset, seed: u64) -> Result<Self> {
        let (c, h, w) = ds.image_shape();
        if h != w {
            return Err(Error::invalid("only square images can be stored"));
        }
        Ok(Self {
            format: FORMAT_TAG.to_string(),
            version: 1,
            num_images: ds.len(),
            channels: c,
            image_size: h,
            factor_names: ds.factor_names().to_vec(),
            factor_sizes: ds.factor_sizes().to_vec(),
            seed,
            metadata: BTreeMap::new(),
        })
    }
}

pub fn save_dataset(ds: &FactorDataset, dir: &Path, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_vec_pretty(manifest).map_err(|e| Error::format(dir.join(MANIFEST_FILE), e.to_string()))?;
    write(&dir.join(MANIFEST_FILE), &json)?;
    let mut images = Vec::with_capacity(ds.pixels().len() * 4);
    for i in 0..ds.pixels().len() {
        images.extend_from_slice(&ds.pixels().get(i).to_le_bytes());
    }
    write(&dir.join(IMAGES_FILE), &images)?;
    let factors: Vec<u8> = ds.factors().iter().flat_map(|&v| (v as i32).to_le_bytes()).collect();
    write(&dir.join(FACTORS_FILE), &factors)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads a dataset directory. Images holding only 0 and 1 are stored compactly.
pub fn load_dataset(dir: &Path) -> Result<(FactorDataset, Manifest)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_slice(&read(&manifest_path)?)
        .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    if manifest.format != FORMAT_TAG || manifest.version != 1 {
        return Err(Error::format(&manifest_path, format!("unsupported format {} v{}", manifest.format, manifest.version)));
    }
    let n = manifest.num_images;
    let image_len = manifest.channels * manifest.image_size * manifest.image_size;
    let f = manifest.factor_sizes.len();

    let images_path = dir.join(IMAGES_FILE);
    let raw = read(&images_path)?;
    if raw.len() != n * image_len * 4 {
        return Err(Error::format(&images_path, format!("expected {} bytes, found {}", n * image_len * 4, raw.len())));
    }
    let floats: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    if let Some(bad) = floats.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::format(&images_path, format!("pixel value {bad} outside [0, 1]")));
    }
    let pixels = if floats.iter().all(|&v| v == 0.0 || v == 1.0) {
        Pixels::Bytes { data: floats.iter().map(|&v| v as u8).collect(), scale: 1.0 }
    } else {
        Pixels::Float(floats)
    };

    let factors_path = dir.join(FACTORS_FILE);
    let raw = read(&factors_path)?;
    if raw.len() != n * f * 4 {
        return Err(Error::format(&factors_path, format!("expected {} bytes, found {}", n * f * 4, raw.len())));
    }
    let mut factors = Vec::with_capacity(n * f);
    for b in raw.chunks_exact(4) {
        let v = i32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        factors.push(u32::try_from(v).map_err(|_| Error::format(&factors_path, format!("negative factor {v}")))?);
    }
    let ds = FactorDataset::new(
        pixels,
        (manifest.channels, manifest.image_size, manifest.image_size),
        factors,
        manifest.factor_sizes.clone(),
        manifest.factor_names.clone(),
    )
    .map_err(|e| Error::format(dir, e.to_string()))?;
    Ok((ds, manifest))
}
