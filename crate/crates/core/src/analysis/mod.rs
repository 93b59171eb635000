//! Qualitative analyses exported as data: latent scatter tables, eigenvector
//! heatmaps, dimension-swap traversals, composite-symmetry decompositions and
//! sequential symmetry replays. Every analysis works on posterior means.

mod export;

use std::path::Path;

use candle_core::Tensor;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::matrix_exponential;
use crate::composition::{act_batched, SwitchMode};
use crate::data::{FactorDataset, FactorQuery};
use crate::error::{Error, Result};
use crate::nn::{from_rows, to_rows, to_vec};
use crate::train::CfaslModel;
use crate::vae::{gaussian_kl_per_dim, ConvVae, EncoderOutput};

pub use export::{write_csv, write_json, write_png_strip};

/// Default number of inputs in a scatter export.
pub const SCATTER_DEFAULT_N: usize = 640;

/// Images to Gaussian posteriors.
pub trait PosteriorEncoder {
    fn posterior(&self, images: &Tensor) -> Result<EncoderOutput>;
}

/// Latents to images in [0, 1].
pub trait ImageDecoder {
    fn decode_images(&self, z: &Tensor) -> Result<Tensor>;
}

impl PosteriorEncoder for ConvVae {
    fn posterior(&self, images: &Tensor) -> Result<EncoderOutput> {
        self.encode(images)
    }
}

impl ImageDecoder for ConvVae {
    fn decode_images(&self, z: &Tensor) -> Result<Tensor> {
        self.decode(z)
    }
}

/// Mean `KL(q(z_d | x) || N(0, 1))` per dimension over the rows of `out`.
pub fn mean_kl_per_dim(out: &EncoderOutput) -> Result<Vec<f64>> {
    Ok(to_vec(&gaussian_kl_per_dim(&out.mu, &out.log_var)?.mean(0)?)?)
}

/// Dimension indices sorted by descending value, ties to the lower index.
pub fn rank_descending(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

fn image_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    to_rows(&t.flatten_from(1)?)
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub coords: [f64; 3],
    pub color: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterTable {
    pub dims: [usize; 3],
    /// Mean per-dimension KL of the exported inputs.
    pub kl_per_dim: Vec<f64>,
    pub color_factor: usize,
    pub rows: Vec<ScatterRow>,
    pub warnings: Vec<String>,
}

impl ScatterTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let header = [format!("z{}", self.dims[0]), format!("z{}", self.dims[1]), format!("z{}", self.dims[2])];
        write_csv(
            path,
            &[&header[0], &header[1], &header[2], "color"],
            self.rows.iter().map(|r| {
                let mut v: Vec<String> = r.coords.iter().map(f64::to_string).collect();
                v.push(r.color.to_string());
                v
            }),
        )
    }
}

/// Encodes up to `n` distinct rows matching `fixed` and exports three latent coordinates
/// per row, colored by `color_factor` (default: the first unfixed factor).
///
/// With `dims = None` the three dimensions with the largest mean KL are used.
pub fn latent_scatter_export(
    encoder: &dyn PosteriorEncoder,
    ds: &FactorDataset,
    dims: Option<[usize; 3]>,
    fixed: &FactorQuery,
    n: usize,
    color_factor: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<ScatterTable> {
    let mut rows = ds.matching_rows(fixed)?;
    let mut warnings = Vec::new();
    if rows.is_empty() {
        return Err(Error::invalid("no rows match the factor query"));
    }
    if n > rows.len() {
        warnings.push(format!("requested {n} inputs but only {} match; truncated", rows.len()));
    }
    rows.shuffle(rng);
    rows.truncate(n.max(1));
    let out = encoder.posterior(&ds.images(&rows)?)?;
    let kl = mean_kl_per_dim(&out)?;
    let dims = match dims {
        Some(d) => {
            if d[0] == d[1] || d[1] == d[2] || d[0] == d[2] || d.iter().any(|&x| x >= kl.len()) {
                return Err(Error::invalid(format!("scatter dimensions {d:?} must be distinct and < {}", kl.len())));
            }
            d
        }
        None => {
            let ranked = rank_descending(&kl);
            if ranked.len() < 3 {
                return Err(Error::invalid("scatter needs at least three latent dimensions"));
            }
            [ranked[0], ranked[1], ranked[2]]
        }
    };
    let color_factor = match color_factor {
        Some(f) if f < ds.num_factors() => f,
        Some(f) => return Err(Error::invalid(format!("color factor {f} out of range"))),
        None => (0..ds.num_factors()).find(|f| !fixed.fixed_factors.contains(f)).unwrap_or(0),
    };
    let mu = to_rows(&out.mu)?;
    let table = rows
        .iter()
        .zip(&mu)
        .map(|(&r, z)| ScatterRow { coords: [z[dims[0]], z[dims[1]], z[dims[2]]], color: ds.factor_row(r)[color_factor] })
        .collect();
    Ok(ScatterTable { dims, kl_per_dim: kl, color_factor, rows: table, warnings })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenReport {
    /// Non-increasing.
    pub eigenvalues: Vec<f64>,
    /// One unit eigenvector per row, matching `eigenvalues`.
    pub eigenvectors: Vec<Vec<f64>>,
    /// Mean of `max |v_i| / ||v||` over the kept eigenvectors.
    pub one_hotness: f64,
    pub warnings: Vec<String>,
}

impl EigenReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let d = self.eigenvectors.first().map_or(0, Vec::len);
        let names: Vec<String> = std::iter::once("eigenvalue".to_string()).chain((0..d).map(|i| format!("z{i}"))).collect();
        let header: Vec<&str> = names.iter().map(String::as_str).collect();
        write_csv(
            path,
            &header,
            self.eigenvalues.iter().zip(&self.eigenvectors).map(|(l, v)| {
                std::iter::once(l.to_string()).chain(v.iter().map(f64::to_string)).collect()
            }),
        )
    }
}

/// Relative eigenvalue below which a component counts as absent.
const RANK_TOLERANCE: f64 = 1e-10;

/// Principal axes of the sample covariance of `latents` (rows are samples).
pub fn principal_axes(latents: &[Vec<f64>]) -> Result<EigenReport> {
    let n = latents.len();
    let d = latents.first().map_or(0, Vec::len);
    if d == 0 || n < d || n < 2 {
        return Err(Error::invalid(format!("need at least D = {d} >= 1 samples, got {n}")));
    }
    let data = DMatrix::from_fn(n, d, |i, j| latents[i][j]);
    let mean = data.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| data[(i, j)] - mean[j]);
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let kept: Vec<usize> = order.iter().copied().filter(|&k| eig.eigenvalues[k] > RANK_TOLERANCE * top.max(f64::MIN_POSITIVE)).collect();
    let mut warnings = Vec::new();
    if kept.len() < d {
        warnings.push(format!("covariance has rank {} < {d}; keeping {} components", kept.len(), kept.len()));
    }
    if kept.is_empty() {
        return Err(Error::DegenerateRepresentation("latents have zero covariance".into()));
    }
    let eigenvectors: Vec<Vec<f64>> = kept.iter().map(|&k| eig.eigenvectors.column(k).iter().copied().collect()).collect();
    let one_hotness = eigenvectors
        .iter()
        .map(|v| {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().fold(0.0f64, |m, x| m.max(x.abs())) / norm
        })
        .sum::<f64>()
        / eigenvectors.len() as f64;
    Ok(EigenReport { eigenvalues: kept.iter().map(|&k| eig.eigenvalues[k]).collect(), eigenvectors, one_hotness, warnings })
}

/// Eigen-decomposition of the posterior means of `n` random dataset rows.
pub fn eigenvector_heatmap(
    encoder: &dyn PosteriorEncoder,
    ds: &FactorDataset,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EigenReport> {
    if n > ds.len() {
        return Err(Error::invalid(format!("n = {n} exceeds the {} available rows", ds.len())));
    }
    let mut rows: Vec<usize> = (0..ds.len()).collect();
    rows.shuffle(rng);
    rows.truncate(n);
    principal_axes(&to_rows(&encoder.posterior(&ds.images(&rows)?)?.mu)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraversalRecord {
    pub source_latent: Vec<f64>,
    pub target_latent: Vec<f64>,
    /// Per-dimension KL of the source posterior.
    pub kl_per_dim: Vec<f64>,
    /// `edited_latents[t]` copies `edited_dims[t]` from the target onto the previous stage.
    pub edited_latents: Vec<Vec<f64>>,
    pub edited_dims: Vec<usize>,
    /// Decode of the source followed by one decode per edit.
    pub decoded_images: Vec<Vec<f64>>,
    pub image_shape: (usize, usize, usize),
}

/// Replaces the source latent's dimensions with the target's one at a time, in
/// descending order of the source posterior's per-dimension KL.
pub fn dimension_swap_traversal<M: PosteriorEncoder + ImageDecoder + ?Sized>(
    model: &M,
    x1: &Tensor,
    x2: &Tensor,
    num_dims: usize,
) -> Result<TraversalRecord> {
    let shape = single_image_shape(x1)?;
    let a = model.posterior(x1)?;
    let b = model.posterior(x2)?;
    let source = to_rows(&a.mu)?.remove(0);
    let target = to_rows(&b.mu)?.remove(0);
    if num_dims > source.len() {
        return Err(Error::invalid(format!("num_dims {num_dims} exceeds latent dimension {}", source.len())));
    }
    let kl = mean_kl_per_dim(&a)?;
    let edited_dims: Vec<usize> = rank_descending(&kl).into_iter().take(num_dims).collect();
    let mut current = source.clone();
    let mut edited = Vec::with_capacity(num_dims);
    for &d in &edited_dims {
        current[d] = target[d];
        edited.push(current.clone());
    }
    let stages: Vec<Vec<f64>> = std::iter::once(source.clone()).chain(edited.iter().cloned()).collect();
    let decoded = image_rows(&model.decode_images(&from_rows(&stages)?)?)?;
    Ok(TraversalRecord {
        source_latent: source,
        target_latent: target,
        kl_per_dim: kl,
        edited_latents: edited,
        edited_dims,
        decoded_images: decoded,
        image_shape: shape,
    })
}

fn single_image_shape(x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.dims() {
        [1, c, h, w] => Ok((*c, *h, *w)),
        dims => Err(Error::invalid(format!("expected one image (1, C, H, W), got {dims:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionRecord {
    pub active_sections: Vec<usize>,
    /// `z1`, then `z1` after each active section's factor is applied cumulatively.
    pub stage_latents: Vec<Vec<f64>>,
    pub decoded_images: Vec<Vec<f64>>,
    /// Image MSE between the last stage and `decode(g_c z1)`.
    pub single_shot_mse: f64,
    pub image_shape: (usize, usize, usize),
}

/// Applies the hard-switched composite symmetry between `x1` and `x2` one active section
/// at a time, decoding each stage.
pub fn composite_decomposition(model: &CfaslModel, x1: &Tensor, x2: &Tensor) -> Result<DecompositionRecord> {
    let shape = single_image_shape(x1)?;
    single_image_shape(x2)?;
    let mut unused = rand::SeedableRng::seed_from_u64(0);
    let g = model.extract(x1, x2, SwitchMode::Hard, &mut unused)?;
    let z1 = model.vae.encode(x1)?.mu;
    let switches = to_vec(&g.switch_values.get(0)?)?;
    let active: Vec<usize> = (0..switches.len()).filter(|&i| switches[i] > 0.5).collect();
    let mut stages = vec![to_rows(&z1)?.remove(0)];
    let mut z = z1.clone();
    for &i in &active {
        let algebra = (g.section_algebra.get(0)?.get(i)? * switches[i])?;
        let factor = matrix_exponential(&algebra)?.unsqueeze(0)?;
        z = act_batched(&factor, &z)?;
        stages.push(to_rows(&z)?.remove(0));
    }
    let decoded = image_rows(&model.vae.decode(&from_rows(&stages)?)?)?;
    let single = image_rows(&model.vae.decode(&g.act(&z1)?)?)?.remove(0);
    let single_shot_mse = mse(decoded.last().expect("at least one stage"), &single);
    Ok(DecompositionRecord { active_sections: active, stage_latents: stages, decoded_images: decoded, single_shot_mse, image_shape: shape })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayStep {
    pub active_sections: Vec<usize>,
    /// MSE of `decode(g z_{k-1})` against `x_k`.
    pub replay_mse: f64,
    /// MSE of `decode(z_k)` against `x_k`.
    pub reconstruction_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub steps: Vec<ReplayStep>,
    /// One replayed frame per consecutive pair.
    pub replay_images: Vec<Vec<f64>>,
    pub image_shape: (usize, usize, usize),
}

/// Extracts the symmetry between each consecutive pair of `images` `(K, C, H, W)` and
/// replays it on the earlier latent.
pub fn sequential_symmetry_replay(model: &CfaslModel, images: &Tensor) -> Result<ReplayRecord> {
    let (k, c, h, w) = images.dims4()?;
    if k < 2 {
        return Err(Error::invalid("replay needs at least two images"));
    }
    let prev = images.narrow(0, 0, k - 1)?;
    let next = images.narrow(0, 1, k - 1)?;
    let mut unused = rand::SeedableRng::seed_from_u64(0);
    let g = model.extract(&prev, &next, SwitchMode::Hard, &mut unused)?;
    let z_prev = model.vae.encode(&prev)?.mu;
    let z_next = model.vae.encode(&next)?.mu;
    let replay = image_rows(&model.vae.decode(&g.act(&z_prev)?)?)?;
    let recon = image_rows(&model.vae.decode(&z_next)?)?;
    let targets = image_rows(&next)?;
    let switches = to_rows(&g.switch_values)?;
    let steps = (0..k - 1)
        .map(|i| ReplayStep {
            active_sections: (0..switches[i].len()).filter(|&s| switches[i][s] > 0.5).collect(),
            replay_mse: mse(&replay[i], &targets[i]),
            reconstruction_mse: mse(&recon[i], &targets[i]),
        })
        .collect();
    Ok(ReplayRecord { steps, replay_images: replay, image_shape: (c, h, w) })
}

/// Writes `<stem>.png` (frame strip) and `<stem>.json` (the record).
pub fn export_frames<T: Serialize>(
    dir: &Path,
    stem: &str,
    frames: &[Vec<f64>],
    shape: (usize, usize, usize),
    record: &T,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_png_strip(&dir.join(format!("{stem}.png")), frames, shape)?;
    write_json(&dir.join(format!("{stem}.json")), record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticGrid};
    use crate::nn::{device, ParamStore};
    use crate::train::{CodebookConfig, RunConfig};
    use crate::vae::VaeArchitecture;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn dataset() -> FactorDataset {
        generate_synthetic(&SyntheticGrid { positions_x: 4, positions_y: 4, scales: 2, shapes: 2 }, 16, 0).unwrap().0
    }

    fn vae(d: usize) -> ConvVae {
        let arch = VaeArchitecture { image_size: 16, channels: 1, latent_dim: d };
        ConvVae::new(arch, &mut ParamStore::new(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    fn model(d: usize) -> CfaslModel {
        let cfg = RunConfig {
            codebook: CodebookConfig { sections: d, elements_per_section: 2, latent_dim: d, init_scale: 1.0 },
            ..RunConfig::default()
        };
        CfaslModel::new(&cfg, (1, 16, 16), &mut ChaCha8Rng::seed_from_u64(4)).unwrap()
    }

    /// Diagonal generators and heads whose section switches follow `on`.
    fn commuting_model(d: usize, on: &[bool]) -> CfaslModel {
        let m = model(d);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(0.0, 0.3).unwrap();
        let mut gens = vec![0.0; d * 2 * d * d];
        for s in 0..d {
            for e in 0..2 {
                for k in 0..d {
                    gens[((s * 2 + e) * d + k) * d + k] = normal.sample(&mut rng);
                }
            }
        }
        m.codebook.var().set(&Tensor::from_vec(gens, (d, 2, d, d), &device()).unwrap()).unwrap();
        let bias: Vec<f64> = on.iter().flat_map(|&o| if o { [0.0, 30.0] } else { [30.0, 0.0] }).collect();
        m.heads.section_bias.set(&Tensor::from_vec(bias, (d, 2), &device()).unwrap()).unwrap();
        m.heads.section_weight.set(&m.heads.section_weight.zeros_like().unwrap()).unwrap();
        m
    }

    #[test]
    fn scatter_kl_matches_closed_form() {
        let ds = dataset();
        let enc = vae(5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let table = latent_scatter_export(&enc, &ds, None, &FactorQuery::none(), 20, None, &mut rng).unwrap();
        assert_eq!(table.rows.len(), 20);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut rows: Vec<usize> = (0..ds.len()).collect();
        rows.shuffle(&mut rng);
        rows.truncate(20);
        let out = enc.encode(&ds.images(&rows).unwrap()).unwrap();
        let (mu, lv) = (to_rows(&out.mu).unwrap(), to_rows(&out.log_var).unwrap());
        for d in 0..5 {
            let want = (0..20)
                .map(|i| 0.5 * (mu[i][d].powi(2) + lv[i][d].exp() - lv[i][d] - 1.0))
                .sum::<f64>()
                / 20.0;
            assert!((table.kl_per_dim[d] - want).abs() < 1e-12);
        }
        let ranked = rank_descending(&table.kl_per_dim);
        assert_eq!(table.dims, [ranked[0], ranked[1], ranked[2]]);
        assert_eq!(SCATTER_DEFAULT_N, 640);
    }

    #[test]
    fn scatter_with_all_factors_fixed() {
        let ds = dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = FactorQuery::new(vec![0, 1, 2, 3], vec![1, 0, 2, 3]);
        let table = latent_scatter_export(&vae(4), &ds, Some([0, 1, 2]), &q, 5, None, &mut rng).unwrap();
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.warnings.len(), 1);
        assert!(latent_scatter_export(&vae(4), &ds, Some([0, 0, 2]), &q, 5, None, &mut rng).is_err());
        let dir = tempfile::tempdir().unwrap();
        table.write_csv(&dir.path().join("scatter.csv")).unwrap();
    }

    fn axis_latents(n: usize, sds: &[f64], rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let normal = Normal::new(0.0, 1.0).unwrap();
        (0..n).map(|_| sds.iter().map(|s| s * normal.sample(rng)).collect()).collect()
    }

    #[test]
    fn axis_aligned_latents_are_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let latents = axis_latents(20_000, &[3.0, 0.5, 2.0, 1.0], &mut rng);
        let r = principal_axes(&latents).unwrap();
        assert!(r.one_hotness >= 0.99, "{}", r.one_hotness);
        assert!(r.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        for (i, a) in r.eigenvectors.iter().enumerate() {
            for (j, b) in r.eigenvectors.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                assert!((dot - f64::from(u8::from(i == j))).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rotated_plane_gives_diagonal_eigenvectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = std::f64::consts::FRAC_1_SQRT_2;
        let latents: Vec<Vec<f64>> = axis_latents(20_000, &[3.0, 1.0, 0.2], &mut rng)
            .into_iter()
            .map(|z| vec![c * (z[0] - z[1]), c * (z[0] + z[1]), z[2]])
            .collect();
        let r = principal_axes(&latents).unwrap();
        for v in &r.eigenvectors[..2] {
            let peak = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            assert!((peak - c).abs() < 0.01, "{v:?}");
        }
        let want = (2.0 * c + 1.0) / 3.0;
        assert!((r.one_hotness - want).abs() < 0.01);
    }

    #[test]
    fn rank_deficiency_reduces_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let latents: Vec<Vec<f64>> =
            axis_latents(100, &[1.0, 2.0], &mut rng).into_iter().map(|z| vec![z[0], z[1], z[0]]).collect();
        let r = principal_axes(&latents).unwrap();
        assert_eq!(r.eigenvalues.len(), 2);
        assert_eq!(r.warnings.len(), 1);
        assert!(principal_axes(&latents[..2]).is_err());
    }

    #[test]
    fn heatmap_on_untrained_encoder() {
        let ds = dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = eigenvector_heatmap(&vae(4), &ds, 64, &mut rng).unwrap();
        assert!(r.one_hotness > 0.0 && r.one_hotness <= 1.0 + 1e-12);
        assert!(eigenvector_heatmap(&vae(4), &ds, ds.len() + 1, &mut rng).is_err());
    }

    #[test]
    fn traversal_contract() {
        let ds = dataset();
        let enc = vae(6);
        let x1 = ds.images(&[3]).unwrap();
        let x2 = ds.images(&[40]).unwrap();
        let rec = dimension_swap_traversal(&enc, &x1, &x2, 6).unwrap();
        assert_eq!(rec.edited_latents.last().unwrap(), &rec.target_latent);
        assert_eq!(rec.decoded_images.len(), 7);
        let mut prev = rec.source_latent.clone();
        for (z, &d) in rec.edited_latents.iter().zip(&rec.edited_dims) {
            assert!((0..6).all(|k| k == d || z[k] == prev[k]));
            prev = z.clone();
        }
        // Independent ranking of the closed-form KL values.
        let out = enc.encode(&x1).unwrap();
        let (mu, lv) = (to_vec(&out.mu).unwrap(), to_vec(&out.log_var).unwrap());
        let kl: Vec<f64> = (0..6).map(|d| 0.5 * (mu[d] * mu[d] + lv[d].exp() - lv[d] - 1.0)).collect();
        let mut order: Vec<usize> = (0..6).collect();
        order.sort_by(|&a, &b| kl[b].partial_cmp(&kl[a]).unwrap());
        assert_eq!(rec.edited_dims, order);
        assert!(dimension_swap_traversal(&enc, &x1, &x2, 7).is_err());
    }

    #[test]
    fn traversal_of_identical_inputs_repeats_reconstruction() {
        let ds = dataset();
        let x = ds.images(&[9]).unwrap();
        let rec = dimension_swap_traversal(&vae(4), &x, &x, 3).unwrap();
        assert!(rec.decoded_images.iter().all(|img| img == &rec.decoded_images[0]));
    }

    #[test]
    fn decomposition_matches_single_shot_for_commuting_codebook() {
        let ds = dataset();
        let m = commuting_model(4, &[true, false, true, true]);
        let rec = composite_decomposition(&m, &ds.images(&[1]).unwrap(), &ds.images(&[50]).unwrap()).unwrap();
        assert_eq!(rec.active_sections, vec![0, 2, 3]);
        assert_eq!(rec.decoded_images.len(), 4);
        assert!(rec.single_shot_mse < 1e-5, "{}", rec.single_shot_mse);
        assert!(crate::codebook::commutativity_loss(&m.codebook).unwrap().to_scalar::<f64>().unwrap() < 1e-6);
    }

    #[test]
    fn decomposition_without_active_sections() {
        let ds = dataset();
        let m = commuting_model(4, &[false; 4]);
        let x1 = ds.images(&[1]).unwrap();
        let rec = composite_decomposition(&m, &x1, &ds.images(&[50]).unwrap()).unwrap();
        assert!(rec.active_sections.is_empty());
        let recon = image_rows(&m.vae.decode(&m.vae.encode(&x1).unwrap().mu).unwrap()).unwrap();
        assert_eq!(rec.decoded_images, recon);
    }

    #[test]
    fn replay_of_constant_sequence_is_reconstruction() {
        let ds = dataset();
        let m = commuting_model(4, &[false; 4]);
        let seq = ds.images(&[7, 7, 7]).unwrap();
        let rec = sequential_symmetry_replay(&m, &seq).unwrap();
        assert_eq!(rec.steps.len(), 2);
        for s in &rec.steps {
            assert!(s.active_sections.is_empty());
            assert!((s.replay_mse - s.reconstruction_mse).abs() < 1e-12);
        }
        let two = sequential_symmetry_replay(&model(4), &ds.images(&[1, 2]).unwrap()).unwrap();
        assert_eq!(two.replay_images.len(), 1);
        assert!(sequential_symmetry_replay(&m, &ds.images(&[1]).unwrap()).is_err());
    }

    #[test]
    fn frame_export_writes_png_and_json() {
        let ds = dataset();
        let x = ds.images(&[2]).unwrap();
        let rec = dimension_swap_traversal(&vae(4), &x, &ds.images(&[5]).unwrap(), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_frames(dir.path(), "swap", &rec.decoded_images, rec.image_shape, &rec).unwrap();
        assert!(dir.path().join("swap.png").exists() && dir.path().join("swap.json").exists());
    }
}
