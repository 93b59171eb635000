//! FVM and the multi-factor m-FVM_k disentanglement scores.
//!
//! Both scores run independent trials, each with its own ChaCha stream derived from
//! the protocol seed, so parallel and sequential execution give identical reports.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_indices_with_fixed_factors, FactorDataset, FactorQuery};
use crate::error::{Error, Result};
use crate::exec::ExecMode;

/// Maps dataset rows to latent vectors (posterior means for a trained model).
pub trait LatentEncoder: Sync {
    fn latent_dim(&self) -> usize;
    fn encode(&self, ds: &FactorDataset, indices: &[usize]) -> Result<Vec<Vec<f64>>>;
}

/// Precomputed latent row per dataset row.
#[derive(Debug, Clone)]
pub struct TableEncoder {
    rows: Vec<Vec<f64>>,
    dim: usize,
}

impl TableEncoder {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map(Vec::len).ok_or_else(|| Error::invalid("latent table is empty"))?;
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("latent rows must share one positive length"));
        }
        Ok(Self { rows, dim })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Same latents with every row passed through `f`.
    pub fn map_rows(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Self> {
        Self::new(self.rows.iter().map(|r| f(r)).collect())
    }
}

impl LatentEncoder for TableEncoder {
    fn latent_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, ds: &FactorDataset, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
        if self.rows.len() != ds.len() {
            return Err(Error::invalid(format!("latent table has {} rows, dataset {}", self.rows.len(), ds.len())));
        }
        indices
            .iter()
            .map(|&i| self.rows.get(i).cloned().ok_or_else(|| Error::invalid(format!("row {i} out of range"))))
            .collect()
    }
}

/// How m-FVM_k turns the tally into a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    /// Sum of the modal dimension-subset count per factor-subset, over the trial count.
    #[default]
    ModalSumOverTrials,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub trials: usize,
    pub samples_per_vote: usize,
    /// Dimensions whose global variance falls below this are ignored.
    pub prune_threshold: f64,
    pub seed: u64,
    #[serde(default)]
    pub aggregate: Aggregate,
}

impl Default for Protocol {
    fn default() -> Self {
        Self { trials: 800, samples_per_vote: 100, prune_threshold: 0.06, seed: 0, aggregate: Aggregate::default() }
    }
}

impl Protocol {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::invalid("trials must be >= 1"));
        }
        if self.samples_per_vote < 2 {
            return Err(Error::invalid("samples_per_vote must be >= 2"));
        }
        if !(self.prune_threshold >= 0.0) {
            return Err(Error::invalid("prune_threshold must be >= 0"));
        }
        Ok(())
    }

    /// Independent stream per trial; stream 0 is reserved for global statistics.
    fn trial_rng(&self, trial: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(trial as u64 + 1);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub score: f64,
    pub k: Option<usize>,
    pub trials: usize,
    pub prune_threshold: f64,
    pub votes_per_trial: usize,
    pub seed: u64,
    pub active_dims: Vec<usize>,
    /// Configuration snapshot of the producing run, when there is one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// `name  k  score  trials` row for terminal tables.
    pub fn table_row(&self) -> String {
        let k = self.k.map_or("-".to_string(), |k| k.to_string());
        format!("{:<8} {:>3} {:>8.4} {:>6}", self.name, k, self.score, self.trials)
    }
}

/// Global per-dimension standard deviation and the surviving dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalScale {
    pub std: Vec<f64>,
    pub active: Vec<usize>,
}

fn variance(rows: &[Vec<f64>], d: usize) -> f64 {
    let n = rows.len() as f64;
    let mean = rows.iter().map(|r| r[d]).sum::<f64>() / n;
    rows.iter().map(|r| (r[d] - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Estimates the global scale from `samples_per_vote * trials` uniformly drawn rows.
pub fn global_scale(encoder: &dyn LatentEncoder, ds: &FactorDataset, protocol: &Protocol) -> Result<GlobalScale> {
    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
    let n = protocol.samples_per_vote * protocol.trials;
    let indices: Vec<usize> = (0..n).map(|_| rng.random_range(0..ds.len())).collect();
    let latents = encoder.encode(ds, &indices)?;
    let dim = encoder.latent_dim();
    let var: Vec<f64> = (0..dim).map(|d| variance(&latents, d)).collect();
    let active: Vec<usize> = (0..dim).filter(|&d| var[d] >= protocol.prune_threshold).collect();
    if active.is_empty() {
        return Err(Error::DegenerateRepresentation(format!(
            "every latent dimension has variance below {}",
            protocol.prune_threshold
        )));
    }
    if let Some(&d) = active.iter().find(|&&d| var[d] <= 0.0) {
        return Err(Error::DegenerateRepresentation(format!("dimension {d} has zero variance")));
    }
    Ok(GlobalScale { std: var.iter().map(|v| v.sqrt()).collect(), active })
}

/// Divides each active dimension by its global std; pruned dimensions are left as is.
pub fn normalize_latents(latents: &[Vec<f64>], scale: &GlobalScale) -> Result<Vec<Vec<f64>>> {
    for &d in &scale.active {
        if !(scale.std[d] > 0.0) {
            return Err(Error::DegenerateRepresentation(format!("dimension {d} has zero std")));
        }
    }
    Ok(latents
        .iter()
        .map(|row| {
            let mut out = row.clone();
            scale.active.iter().for_each(|&d| out[d] /= scale.std[d]);
            out
        })
        .collect())
}

/// The `k` active dimensions with the lowest normalized variance, ascending by index.
/// Ties go to the lower index.
fn lowest_variance_dims(latents: &[Vec<f64>], scale: &GlobalScale, k: usize) -> Result<Vec<usize>> {
    let normalized = normalize_latents(latents, scale)?;
    let mut ranked: Vec<(f64, usize)> = scale.active.iter().map(|&d| (variance(&normalized, d), d)).collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut dims: Vec<usize> = ranked.into_iter().take(k).map(|(_, d)| d).collect();
    dims.sort_unstable();
    Ok(dims)
}

/// One trial: fix `k` random factors at random values and return (factor set, dimension set).
fn vote(
    encoder: &dyn LatentEncoder,
    ds: &FactorDataset,
    scale: &GlobalScale,
    protocol: &Protocol,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut factors: Vec<usize> = sample(rng, ds.num_factors(), k).into_vec();
    factors.sort_unstable();
    let values = factors.iter().map(|&f| rng.random_range(0..ds.factor_sizes()[f] as u32)).collect();
    let query = FactorQuery::new(factors.clone(), values);
    let rows = sample_indices_with_fixed_factors(ds, &query, protocol.samples_per_vote, rng)?;
    let latents = encoder.encode(ds, &rows)?;
    Ok((factors, lowest_variance_dims(&latents, scale, k)?))
}

fn run_votes(
    encoder: &dyn LatentEncoder,
    ds: &FactorDataset,
    protocol: &Protocol,
    k: usize,
    mode: ExecMode,
) -> Result<(GlobalScale, Vec<(Vec<usize>, Vec<usize>)>)> {
    protocol.validate()?;
    if encoder.latent_dim() == 0 {
        return Err(Error::invalid("encoder has no latent dimensions"));
    }
    let scale = global_scale(encoder, ds, protocol)?;
    if scale.active.len() < k {
        return Err(Error::DegenerateRepresentation(format!(
            "{} active dimensions cannot host {k} fixed factors",
            scale.active.len()
        )));
    }
    let votes = mode.try_map_range(protocol.trials, |t| {
        let mut rng = protocol.trial_rng(t);
        vote(encoder, ds, &scale, protocol, k, &mut rng)
    })?;
    Ok((scale, votes))
}

fn report(name: &str, score: f64, k: Option<usize>, protocol: &Protocol, scale: GlobalScale) -> MetricReport {
    MetricReport {
        name: name.to_string(),
        score,
        k,
        trials: protocol.trials,
        prune_threshold: protocol.prune_threshold,
        votes_per_trial: protocol.samples_per_vote,
        seed: protocol.seed,
        active_dims: scale.active,
        config: None,
    }
}

/// Factor-VAE metric: accuracy of the majority-vote classifier from lowest-variance
/// dimension to fixed factor, over all votes.
pub fn fvm(encoder: &dyn LatentEncoder, ds: &FactorDataset, protocol: &Protocol, mode: ExecMode) -> Result<MetricReport> {
    if ds.num_factors() < 2 {
        return Err(Error::invalid("FVM needs at least two factors"));
    }
    let (scale, votes) = run_votes(encoder, ds, protocol, 1, mode)?;
    let mut counts = vec![vec![0usize; ds.num_factors()]; encoder.latent_dim()];
    for (f, d) in &votes {
        counts[d[0]][f[0]] += 1;
    }
    let correct: usize = counts.iter().map(|row| row.iter().copied().max().unwrap_or(0)).sum();
    Ok(report("fvm", correct as f64 / votes.len() as f64, None, protocol, scale))
}

/// Tally of dimension subsets per factor subset.
pub type SubsetTally = BTreeMap<Vec<usize>, BTreeMap<Vec<usize>, usize>>;

fn tally(votes: &[(Vec<usize>, Vec<usize>)]) -> SubsetTally {
    let mut t = SubsetTally::new();
    for (factors, dims) in votes {
        *t.entry(factors.clone()).or_default().entry(dims.clone()).or_default() += 1;
    }
    t
}

fn modal_score(t: &SubsetTally, trials: usize, aggregate: Aggregate) -> f64 {
    match aggregate {
        Aggregate::ModalSumOverTrials => {
            let modal: usize = t.values().map(|dims| dims.values().copied().max().unwrap_or(0)).sum();
            modal as f64 / trials as f64
        }
    }
}

/// m-FVM_k: fix `k` factors per trial, take the `k` lowest-std dimensions as an unordered
/// set, and score the modal dimension set of each factor set.
pub fn m_fvm(
    encoder: &dyn LatentEncoder,
    ds: &FactorDataset,
    k: usize,
    protocol: &Protocol,
    mode: ExecMode,
) -> Result<MetricReport> {
    if k < 2 || k >= ds.num_factors() {
        return Err(Error::invalid(format!("k must satisfy 2 <= k <= {}, got {k}", ds.num_factors().saturating_sub(1))));
    }
    let (scale, votes) = run_votes(encoder, ds, protocol, k, mode)?;
    let score = modal_score(&tally(&votes), protocol.trials, protocol.aggregate);
    Ok(report("m_fvm", score, Some(k), protocol, scale))
}

/// The m-FVM tally rule applied with a single fixed factor, for cross-checking [`fvm`].
pub fn m_fvm_single(
    encoder: &dyn LatentEncoder,
    ds: &FactorDataset,
    protocol: &Protocol,
    mode: ExecMode,
) -> Result<MetricReport> {
    let (scale, votes) = run_votes(encoder, ds, protocol, 1, mode)?;
    let score = modal_score(&tally(&votes), protocol.trials, protocol.aggregate);
    Ok(report("m_fvm", score, Some(1), protocol, scale))
}

/// Which score to simulate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Fvm,
    MFvm(usize),
}

/// Mean score of `repeats` factor-independent standard-normal representations of
/// dimension `dim`, each scored with the given protocol on fresh seeds.
pub fn chance_level(
    ds: &FactorDataset,
    dim: usize,
    metric: MetricKind,
    protocol: &Protocol,
    repeats: usize,
    seed: u64,
    mode: ExecMode,
) -> Result<f64> {
    if repeats == 0 {
        return Err(Error::invalid("repeats must be >= 1"));
    }
    let mut total = 0.0;
    for r in 0..repeats {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let encoder = noise_encoder(ds.len(), dim, &mut rng)?;
        let p = Protocol { seed: rng.random(), ..*protocol };
        total += match metric {
            MetricKind::Fvm => fvm(&encoder, ds, &p, mode)?.score,
            MetricKind::MFvm(k) => m_fvm(&encoder, ds, k, &p, mode)?.score,
        };
    }
    Ok(total / repeats as f64)
}

/// Standard-normal latents that ignore the factors.
pub fn noise_encoder(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<TableEncoder> {
    use rand_distr::{Distribution, StandardNormal};
    TableEncoder::new((0..rows).map(|_| (0..dim).map(|_| StandardNormal.sample(rng)).collect()).collect())
}

/// Latents where factor `f` (scaled to [-1, 1]) drives dimension `dims[f]`, plus Gaussian noise.
pub fn aligned_encoder(ds: &FactorDataset, dim: usize, dims: &[usize], noise: f64, rng: &mut ChaCha8Rng) -> Result<TableEncoder> {
    use rand_distr::{Distribution, Normal};
    if dims.len() != ds.num_factors() || dims.iter().any(|&d| d >= dim) {
        return Err(Error::invalid("need one in-range dimension per factor"));
    }
    let normal = Normal::new(0.0, noise).map_err(|e| Error::invalid(e.to_string()))?;
    TableEncoder::new(
        (0..ds.len())
            .map(|i| {
                let mut z: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
                for (f, (&v, &d)) in ds.factor_row(i).iter().zip(dims).enumerate() {
                    let size = ds.factor_sizes()[f] as f64;
                    z[d] += 2.0 * v as f64 / (size - 1.0).max(1.0) - 1.0;
                }
                z
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticGrid};

    fn dataset() -> FactorDataset {
        generate_synthetic(&SyntheticGrid { positions_x: 8, positions_y: 8, scales: 2, shapes: 2 }, 16, 0).unwrap().0
    }

    fn quick(seed: u64) -> Protocol {
        Protocol { trials: 200, seed, ..Protocol::default() }
    }

    #[test]
    fn defaults() {
        let p = Protocol::default();
        assert_eq!((p.trials, p.samples_per_vote, p.prune_threshold), (800, 100, 0.06));
    }

    #[test]
    fn aligned_representation_scores_high() {
        let ds = dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = aligned_encoder(&ds, 10, &[7, 2, 4, 0], 0.01, &mut rng).unwrap();
        let f = fvm(&enc, &ds, &quick(1), ExecMode::default()).unwrap();
        assert!(f.score >= 0.99, "{}", f.score);
        assert_eq!(f.active_dims, vec![0, 2, 4, 7]);
        let m = m_fvm(&enc, &ds, 2, &quick(1), ExecMode::default()).unwrap();
        assert!(m.score >= 0.95, "{}", m.score);
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let ds = dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = noise_encoder(ds.len(), 6, &mut rng).unwrap();
        let a = m_fvm(&enc, &ds, 3, &quick(5), ExecMode::Parallel).unwrap();
        let b = m_fvm(&enc, &ds, 3, &quick(5), ExecMode::Sequential).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn k_out_of_range() {
        let ds = dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = noise_encoder(ds.len(), 6, &mut rng).unwrap();
        for k in [0, 1, 4, 5] {
            assert!(matches!(m_fvm(&enc, &ds, k, &quick(0), ExecMode::default()), Err(Error::InvalidArgument(_))));
        }
    }

    #[test]
    fn identical_latents_are_degenerate() {
        let ds = dataset();
        let enc = TableEncoder::new(vec![vec![0.5; 4]; ds.len()]).unwrap();
        assert!(matches!(fvm(&enc, &ds, &quick(0), ExecMode::default()), Err(Error::DegenerateRepresentation(_))));
    }

    #[test]
    fn prenormalized_latents_unchanged() {
        let rows = vec![vec![1.0, -2.0], vec![0.5, 3.0]];
        let scale = GlobalScale { std: vec![1.0, 1.0], active: vec![0, 1] };
        assert_eq!(normalize_latents(&rows, &scale).unwrap(), rows);
        let bad = GlobalScale { std: vec![0.0, 1.0], active: vec![0, 1] };
        assert!(normalize_latents(&rows, &bad).is_err());
    }

    #[test]
    fn rescaling_and_permuting_dims_is_harmless() {
        let ds = dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Every dimension stays active under both scalings.
        let enc = aligned_encoder(&ds, 6, &[0, 1, 2, 3], 0.5, &mut rng).unwrap();
        let scaled = enc.map_rows(|r| r.iter().enumerate().map(|(d, v)| v * (1.0 + 3.0 * d as f64)).collect()).unwrap();
        let perm = [3usize, 5, 0, 1, 4, 2];
        let permuted = enc.map_rows(|r| perm.iter().map(|&p| r[p]).collect()).unwrap();
        let p = quick(9);
        let base = m_fvm(&enc, &ds, 2, &p, ExecMode::default()).unwrap().score;
        assert_eq!(base, m_fvm(&scaled, &ds, 2, &p, ExecMode::default()).unwrap().score);
        assert_eq!(base, m_fvm(&permuted, &ds, 2, &p, ExecMode::default()).unwrap().score);
        let base = fvm(&enc, &ds, &p, ExecMode::default()).unwrap().score;
        assert_eq!(base, fvm(&scaled, &ds, &p, ExecMode::default()).unwrap().score);
    }

    #[test]
    fn report_json_round_trip() {
        let ds = dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = aligned_encoder(&ds, 5, &[0, 1, 2, 3], 0.01, &mut rng).unwrap();
        let r = m_fvm(&enc, &ds, 2, &quick(0), ExecMode::default()).unwrap();
        let back: MetricReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.k, Some(2));
        assert!((0.0..=1.0).contains(&r.score));
    }
}
