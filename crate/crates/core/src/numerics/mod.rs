//! Dense linear algebra and the small amount of learning machinery the
//! trainers need: softmax, a two-layer tanh MLP with hand-derived
//! gradients, Adam, and a central-difference gradient checker.

mod adam;
mod matrix;
mod mlp;

pub use adam::AdamState;
pub use matrix::Matrix;
pub use mlp::{Mlp2, MlpGrads};

use crate::error::{Error, Result};

/// Softmax over `logits`, restricted to entries where `allowed` is true.
///
/// Disallowed entries come out as exactly `0.0`. Max-subtraction keeps the
/// exponentials in range.
pub fn softmax(logits: &[f64], allowed: Option<&[bool]>) -> Result<Vec<f64>> {
    let lp = log_softmax(logits, allowed)?;
    Ok(lp
        .into_iter()
        .map(|l| if l == f64::NEG_INFINITY { 0.0 } else { l.exp() })
        .collect())
}

/// Log-softmax with the same masking rule as [`softmax`]; masked entries are
/// `-inf`.
pub fn log_softmax(logits: &[f64], allowed: Option<&[bool]>) -> Result<Vec<f64>> {
    if let Some(mask) = allowed {
        if mask.len() != logits.len() {
            return Err(Error::DimensionMismatch {
                what: "softmax mask",
                expected: logits.len(),
                got: mask.len(),
            });
        }
    }
    let is_open = |i: usize| allowed.is_none_or(|m| m[i]);
    let max = (0..logits.len())
        .filter(|&i| is_open(i))
        .map(|i| logits[i])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptyActionSpace);
    }
    let sum: f64 = (0..logits.len())
        .filter(|&i| is_open(i))
        .map(|i| (logits[i] - max).exp())
        .sum();
    let log_z = max + sum.ln();
    Ok((0..logits.len())
        .map(|i| {
            if is_open(i) {
                logits[i] - log_z
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect())
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some(b) if values[b] >= v => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

/// Compares an analytic gradient with central differences of `f` at `theta`.
///
/// Returns the largest per-coordinate relative error
/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<F>(f: F, analytic: &[f64], theta: &[f64]) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(analytic.len(), theta.len(), "gradient/parameter length");
    let mut probe = theta.to_vec();
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        probe[i] = theta[i] + FD_STEP;
        let up = f(&probe);
        probe[i] = theta[i] - FD_STEP;
        let down = f(&probe);
        probe[i] = theta[i];
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic[i];
        // The floor sits above central-difference roundoff (~eps/h), so
        // exactly-zero gradients such as a bias that cancels do not blow up.
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}
