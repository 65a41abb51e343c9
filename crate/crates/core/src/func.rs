//! Scalar and vector functions shared across the engine.

use crate::error::{Error, Result};

/// Norm threshold below which a cosine similarity is treated as degenerate.
pub const COSINE_EPS: f64 = 1e-12;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cosine similarity of two equal-length vectors.
///
/// Returns `(value, degenerate)`. When either norm is below [`COSINE_EPS`]
/// the value is 0 and `degenerate` is set.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> (f64, bool) {
    assert_eq!(u.len(), v.len(), "cosine_similarity length mismatch");
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu < COSINE_EPS || nv < COSINE_EPS {
        return (0.0, true);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    ((dot / (nu * nv)).clamp(-1.0, 1.0), false)
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::contract("softmax of an empty vector"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
