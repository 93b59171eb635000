//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use candle_core::{Tensor, Var};
use cfasl::codebook::{
    commutativity_loss, parallel_loss, perpendicular_loss_from_changes, sparsity_loss, PerpForm, PerpSampling,
    SymmetryCodebook,
};
use cfasl::composition::{change_target, compose, prediction_loss, AttentionHeads, PairStatistics, SwitchMode};
use cfasl::equivariance::{decoder_equiv_loss, encoder_equiv_loss};
use cfasl::nn::{device, normal_tensor, sigmoid, to_vec, Linear, ParamStore};
use cfasl::vae::{elbo_beta_tcvae, elbo_beta_vae, EncoderOutput, ObjectiveConfig, TcEstimator};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Matrix = Vec<Vec<f64>>;

pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let n = a.len();
    let m = b[0].len();
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for (k, bk) in b.iter().enumerate() {
            let aik = a[i][k];
            for j in 0..m {
                out[i][j] += aik * bk[j];
            }
        }
    }
    out
}

pub fn identity(d: usize) -> Matrix {
    (0..d).map(|i| (0..d).map(|j| f64::from(u8::from(i == j))).collect()).collect()
}

pub fn add_scaled(a: &Matrix, b: &Matrix, s: f64) -> Matrix {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + s * q).collect()).collect()
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn frobenius_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Truncated power series `Σ_{k<terms} A^k / k!` with no scaling.
pub fn taylor_expm(a: &Matrix, terms: usize) -> Matrix {
    let d = a.len();
    let mut sum = identity(d);
    let mut term = identity(d);
    for k in 1..terms {
        term = matmul(&term, a).into_iter().map(|r| r.into_iter().map(|v| v / k as f64).collect()).collect();
        sum = add_scaled(&sum, &term, 1.0);
    }
    sum
}

/// Largest singular value by power iteration on `AᵀA`.
pub fn spectral_norm(a: &Matrix) -> f64 {
    let d = a[0].len();
    let at: Matrix = (0..d).map(|j| a.iter().map(|r| r[j]).collect()).collect();
    let ata = matmul(&at, a);
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    for _ in 0..500 {
        let w: Vec<f64> = ata.iter().map(|r| r.iter().zip(&v).map(|(x, y)| x * y).sum()).collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = w.into_iter().map(|x| x / norm).collect();
    }
    lambda.sqrt()
}

pub fn gaussian_matrix(d: usize, rng: &mut ChaCha8Rng) -> Matrix {
    (0..d).map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect()).collect()
}

/// Gaussian matrix rescaled to spectral norm drawn uniformly from `(0, bound]`.
pub fn matrix_with_spectral_norm(d: usize, bound: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let a = gaussian_matrix(d, rng);
    let target = bound * (1.0 - rng.random::<f64>());
    let s = target / spectral_norm(&a);
    a.into_iter().map(|r| r.into_iter().map(|v| v * s).collect()).collect()
}

pub fn to_tensor(a: &Matrix) -> Tensor {
    let d = a.len();
    Tensor::from_vec(a.iter().flatten().copied().collect::<Vec<_>>(), (d, a[0].len()), &device()).unwrap()
}

pub fn from_tensor(t: &Tensor) -> Matrix {
    t.to_vec2::<f64>().unwrap()
}

/// Gradient check by central differences.
pub const FD_STEP: f64 = 1e-4;
/// Coordinates probed per parameter tensor at every point.
pub const FD_COORDS: usize = 6;

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps near-zero entries from dominating.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error between autograd and central differences over
/// `FD_COORDS` random coordinates of every variable.
pub fn check_gradients(vars: &[Var], loss: &dyn Fn() -> cfasl::Result<Tensor>, rng: &mut ChaCha8Rng) -> f64 {
    let grads = loss().unwrap().backward().unwrap();
    let mut worst: f64 = 0.0;
    for var in vars {
        let shape = var.as_tensor().shape().clone();
        let base = to_vec(&var.as_tensor().flatten_all().unwrap()).unwrap();
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => to_vec(&g.flatten_all().unwrap()).unwrap(),
            None => vec![0.0; base.len()],
        };
        for _ in 0..FD_COORDS.min(base.len()) {
            let i = rng.random_range(0..base.len());
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, shape.clone(), &device()).unwrap()).unwrap();
                loss().unwrap().to_scalar::<f64>().unwrap()
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            var.set(&Tensor::from_vec(base.clone(), shape.clone(), &device()).unwrap()).unwrap();
            worst = worst.max(relative_error(analytic[i], numeric));
        }
    }
    worst
}

const S: usize = 3;
const SS: usize = 3;
const D: usize = 3;
const PAIRS: usize = 4;

fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    normal_tensor(shape, std, rng).unwrap()
}

fn codebook(rng: &mut ChaCha8Rng) -> SymmetryCodebook {
    SymmetryCodebook::from_generators(&normal(&[S, SS, D, D], 0.4, rng)).unwrap()
}

fn heads(rng: &mut ChaCha8Rng) -> AttentionHeads {
    AttentionHeads::from_tensors(
        &normal(&[S, 4 * D, SS], 0.5, rng),
        &normal(&[S, SS], 0.5, rng),
        &normal(&[S, 4 * D, 2], 0.5, rng),
        &normal(&[S, 2], 0.5, rng),
    )
    .unwrap()
}

fn var(t: Tensor) -> Var {
    Var::from_tensor(&t).unwrap()
}

/// Temperature for the gradient checks through the switch. The training default
/// 1e-4 makes the switch a step function that finite differences cannot resolve.
const CHECK_TEMPERATURE: f64 = 0.5;

/// Names of the checked objectives, in report order.
pub const GRADIENT_CASES: [&str; 10] = [
    "parallel",
    "perpendicular",
    "sparsity",
    "commutative",
    "prediction",
    "encoder_equiv",
    "decoder_equiv",
    "beta_vae",
    "beta_tcvae",
    "beta_tcvae_mws",
];

/// Worst relative gradient error of `case` at one random point drawn from `seed`.
pub fn gradient_error(case: &str, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = normal(&[5, D], 1.0, &mut rng);
    match case {
        "parallel" | "perpendicular" | "sparsity" | "commutative" => {
            let cb = codebook(&mut rng);
            let cb_ref = &cb;
            let z = &z;
            let f: Box<dyn Fn() -> cfasl::Result<Tensor>> = match case {
                "parallel" => Box::new(move || parallel_loss(cb_ref, z, 16, &mut ChaCha8Rng::seed_from_u64(0))),
                "perpendicular" => Box::new(move || {
                    perpendicular_loss_from_changes(
                        &cb_ref.latent_changes(z)?,
                        PerpSampling::Full,
                        PerpForm::CosSq,
                        &mut ChaCha8Rng::seed_from_u64(0),
                    )
                }),
                "sparsity" => Box::new(move || sparsity_loss(cb_ref, z)),
                _ => Box::new(move || commutativity_loss(cb_ref)),
            };
            check_gradients(&[cb.var().clone()], f.as_ref(), &mut rng)
        }
        "prediction" => {
            let h = heads(&mut rng);
            let mu1 = var(normal(&[PAIRS, D], 1.0, &mut rng));
            let mu2 = var(normal(&[PAIRS, D], 1.0, &mut rng));
            let lv = normal(&[PAIRS, D], 0.3, &mut rng);
            let stats = |m1: &Tensor, m2: &Tensor| PairStatistics::from_posteriors(m1, &lv, m2, &lv);
            let target = change_target(&stats(mu1.as_tensor(), mu2.as_tensor()).unwrap(), 0.5).unwrap();
            let f = || prediction_loss(&stats(mu1.as_tensor(), mu2.as_tensor())?, &h, &target);
            let vars = [h.section_weight.clone(), h.section_bias.clone(), mu1.clone(), mu2.clone()];
            check_gradients(&vars, &f, &mut rng)
        }
        "encoder_equiv" | "decoder_equiv" => {
            let cb = codebook(&mut rng);
            let h = heads(&mut rng);
            let z1 = var(normal(&[PAIRS, D], 1.0, &mut rng));
            let z2 = var(normal(&[PAIRS, D], 1.0, &mut rng));
            let lv = normal(&[PAIRS, D], 0.3, &mut rng);
            // A smooth decoder: ReLU kinks inside the finite-difference stencil would
            // measure the network, not the loss.
            let mut store = ParamStore::new();
            let dec = Linear::new(&mut store, "dec", D, 64, &mut rng).unwrap();
            let decode = |z: &Tensor| sigmoid(&dec.forward(z)?)?.reshape((PAIRS, 1, 8, 8)).map_err(Into::into);
            let x2 = normal(&[PAIRS, 1, 8, 8], 1.0, &mut rng).abs().unwrap().clamp(0.0, 1.0).unwrap();
            let g = || {
                let stats = PairStatistics::from_posteriors(z1.as_tensor(), &lv, z2.as_tensor(), &lv)?;
                let mode = SwitchMode::Gumbel { temperature: CHECK_TEMPERATURE };
                compose(&cb, &h, &stats, mode, &mut ChaCha8Rng::seed_from_u64(seed))
            };
            let mut vars =
                vec![cb.var().clone(), h.element_weight.clone(), h.section_weight.clone(), z1.clone(), z2.clone()];
            if case == "encoder_equiv" {
                let f = || encoder_equiv_loss(z1.as_tensor(), z2.as_tensor(), &g()?);
                check_gradients(&vars, &f, &mut rng)
            } else {
                vars.extend(store.iter().map(|(_, v)| v.clone()));
                let f = || decoder_equiv_loss(&x2, z1.as_tensor(), &g()?, decode);
                check_gradients(&vars, &f, &mut rng)
            }
        }
        "beta_vae" | "beta_tcvae" | "beta_tcvae_mws" => {
            let b = 6;
            let x = normal(&[b, 1, 4, 4], 1.0, &mut rng).abs().unwrap().clamp(0.0, 1.0).unwrap();
            let logits = var(normal(&[b, 1, 4, 4], 1.5, &mut rng));
            let mu = var(normal(&[b, D], 1.0, &mut rng));
            let lv = var(normal(&[b, D], 0.5, &mut rng));
            let zs = var(normal(&[b, D], 1.0, &mut rng));
            let out = || EncoderOutput { mu: mu.as_tensor().clone(), log_var: lv.as_tensor().clone() };
            let vars = [logits.clone(), mu.clone(), lv.clone(), zs.clone()];
            if case == "beta_vae" {
                let f = || Ok(elbo_beta_vae(&x, logits.as_tensor(), &out(), 4.0)?.total);
                return check_gradients(&vars[..3], &f, &mut rng);
            }
            let mut cfg = ObjectiveConfig::beta_tcvae(4.0, 1000);
            if case == "beta_tcvae_mws" {
                cfg.tc_estimator = TcEstimator::MinibatchWeighted;
            }
            let f = || Ok(elbo_beta_tcvae(&x, logits.as_tensor(), &out(), zs.as_tensor(), &cfg)?.total);
            check_gradients(&vars, &f, &mut rng)
        }
        other => panic!("unknown gradient case {other}"),
    }
}

/// Worst error of `case` over `points` random points.
pub fn gradient_suite_case(case: &str, points: u64) -> f64 {
    (0..points).map(|p| gradient_error(case, 1000 + p)).fold(0.0, f64::max)
}
