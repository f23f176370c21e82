//! Plain (graph-free) numeric kernels shared by the graph ops and by callers
//! that want a direct evaluation.

use crate::error::{Error, Result};
use crate::tensor::{dot, norm};

/// Norm below which a vector is treated as having no direction.
pub const DIRECTION_EPS: f64 = 1e-12;

/// Component of `a` along `b`: `(a·b / |b|) · b / |b|`.
pub fn project(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::dim("project", &[a.len()], &[b.len()]));
    }
    let nb = norm(b);
    if nb <= DIRECTION_EPS {
        return Err(Error::DegenerateScenario(nb));
    }
    let s = dot(a, b) / (nb * nb);
    Ok(b.iter().map(|v| s * v).collect())
}

/// `a - project(a, b)`: the part of `a` orthogonal to `b`.
pub fn reject(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let p = project(a, b)?;
    Ok(a.iter().zip(p).map(|(x, y)| x - y).collect())
}

/// Cosine similarity, defined as 0 when either vector has (near) zero norm.
pub fn cosine(x: &[f64], y: &[f64]) -> f64 {
    let nx = norm(x);
    let ny = norm(y);
    if nx <= DIRECTION_EPS || ny <= DIRECTION_EPS {
        return 0.0;
    }
    (dot(x, y) / (nx * ny)).clamp(-1.0, 1.0)
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn softmax_in_place(x: &mut [f64]) {
    if x.is_empty() {
        return;
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
