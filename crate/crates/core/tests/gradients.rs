mod common;

use common::{gradient_suite_case, GRADIENT_CASES};

const TOLERANCE: f64 = 1e-3;
const POINTS: u64 = 20;

fn check(case: &str) {
    let worst = gradient_suite_case(case, POINTS);
    assert!(worst < TOLERANCE, "{case}: relative error {worst:.3e}");
}

#[test]
fn parallel_gradients() {
    check("parallel");
}

#[test]
fn perpendicular_gradients() {
    check("perpendicular");
}

#[test]
fn sparsity_gradients() {
    check("sparsity");
}

#[test]
fn commutative_gradients() {
    check("commutative");
}

#[test]
fn prediction_gradients() {
    check("prediction");
}

#[test]
fn encoder_equivariance_gradients() {
    check("encoder_equiv");
}

#[test]
fn decoder_equivariance_gradients() {
    check("decoder_equiv");
}

#[test]
fn beta_vae_gradients() {
    check("beta_vae");
}

#[test]
fn beta_tcvae_gradients() {
    check("beta_tcvae");
    check("beta_tcvae_mws");
}

#[test]
fn every_case_is_covered() {
    assert_eq!(GRADIENT_CASES.len(), 10);
}
