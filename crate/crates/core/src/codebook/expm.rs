//! Differentiable matrix exponential.
//!
//! Scaling and squaring around a fixed-order Taylor core. The argument is
//! scaled by `2^-s` until its induced 1-norm is at most [`SCALED_NORM`],
//! the series is evaluated in Horner form, and the result is squared `s`
//! times. Only tensor ops are used, so gradients flow through candle's
//! autograd. The scaling exponent is picked from the detached values and
//! is shared across a batch.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{device, to_vec, DTYPE};

/// Largest 1-norm fed to the Taylor core.
pub const SCALED_NORM: f64 = 0.5;
/// Truncation order of the Taylor core. At norm 0.5 the remainder is below 1e-15.
pub const TAYLOR_ORDER: usize = 13;

/// `exp(A)` for a square matrix `(D, D)` or a batch `(..., D, D)`.
pub fn matrix_exponential(a: &Tensor) -> Result<Tensor> {
    let dims = a.dims().to_vec();
    if dims.len() < 2 {
        return Err(Error::invalid(format!("matrix exponential needs a matrix, got shape {dims:?}")));
    }
    let d = dims[dims.len() - 1];
    if dims[dims.len() - 2] != d {
        return Err(Error::invalid(format!("matrix exponential needs a square matrix, got shape {dims:?}")));
    }
    if d == 0 {
        return Ok(a.clone());
    }
    let batch: usize = dims[..dims.len() - 2].iter().product();
    let values = to_vec(a)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix exponential input".into()));
    }
    let squarings = scaling_exponent(&values, batch, d);

    let x = a.reshape((batch, d, d))?;
    let x = if squarings > 0 { (x * 0.5f64.powi(squarings as i32))? } else { x };
    let eye = Tensor::eye(d, DTYPE, &device())?;

    // I + X(I + X/2(I + X/3(...)))
    let mut acc = eye.broadcast_add(&(&x / TAYLOR_ORDER as f64)?)?;
    for k in (1..TAYLOR_ORDER).rev() {
        acc = eye.broadcast_add(&(x.matmul(&acc)? / k as f64)?)?;
    }
    for _ in 0..squarings {
        acc = acc.matmul(&acc)?;
    }
    Ok(acc.reshape(dims)?)
}

/// Number of squarings needed so every matrix in the batch has 1-norm <= [`SCALED_NORM`].
fn scaling_exponent(values: &[f64], batch: usize, d: usize) -> u32 {
    let mut norm = 0.0f64;
    for b in 0..batch {
        let m = &values[b * d * d..(b + 1) * d * d];
        for col in 0..d {
            let s: f64 = (0..d).map(|row| m[row * d + col].abs()).sum();
            norm = norm.max(s);
        }
    }
    if norm <= SCALED_NORM {
        0
    } else {
        (norm / SCALED_NORM).log2().ceil() as u32
    }
}
