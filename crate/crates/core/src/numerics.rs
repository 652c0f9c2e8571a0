//! Dense vector primitives, distances and a central-difference gradient checker.
//!
//! Vectors are plain `f64` slices. All functions are pure.

use crate::error::{Error, Result};

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), actual: b.len() });
    }
    if a.is_empty() {
        return Err(Error::InvalidInput("empty vector".into()));
    }
    Ok(())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Euclidean distance between two equal-length vectors.
pub fn l2_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a, b)?;
    Ok(l2_distance_unchecked(a, b))
}

#[inline]
pub(crate) fn l2_distance_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a, b)?;
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Scales `v` to unit Euclidean norm.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub per_parameter_errors: Vec<f64>,
}

/// Compares `analytic_grad` against central differences of `loss_fn` at `params`.
///
/// Relative error per coordinate is `|g_fd - g_an| / max(1e-8, |g_fd| + |g_an|)`.
pub fn finite_diff_check<F>(mut loss_fn: F, params: &[f64], analytic_grad: &[f64], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    check_dims(params, analytic_grad)?;
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig(format!("eps must be positive, got {eps}")));
    }
    let mut x = params.to_vec();
    let mut errors = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let plus = loss_fn(&x);
        x[i] = orig - eps;
        let minus = loss_fn(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("loss at coordinate {i}")));
        }
        let fd = (plus - minus) / (2.0 * eps);
        let an = analytic_grad[i];
        errors.push((fd - an).abs() / (fd.abs() + an.abs()).max(1e-8));
    }
    let max_relative_error = errors.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport { max_relative_error, per_parameter_errors: errors })
}
