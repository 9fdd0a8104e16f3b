//! Per-tensor scale selection: fixed value, tensor max, or EM fit.
//!
//! The EM fit alternates two exact coordinate minimizations of the squared
//! reconstruction error: the E-step re-encodes every element at the current
//! scale (nearest-center assignment), and the M-step refits the scale in
//! closed form for the fixed assignment. The error is therefore
//! non-increasing across iterations.

use crate::codec::{self, code_is_negative, code_magnitude, QuantizedTensor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wide::exp2i;

/// Outcome of an EM scale fit.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleFitReport {
    pub scale: f64,
    /// Number of (E, M) iterations executed.
    pub iterations: usize,
    /// Squared error after each refit; non-increasing.
    pub sse_trace: Vec<f64>,
    /// Whether the relative scale change fell below tolerance.
    pub converged: bool,
}

/// Maximum absolute value of the tensor.
pub fn max_scale(t: &Tensor) -> Result<f64> {
    let mut max = 0.0f32;
    for &v in t.data() {
        let a = v.abs();
        if a > max {
            max = a;
        }
    }
    if max == 0.0 {
        return Err(Error::degenerate(t.name(), "all elements are zero, scale would be 0"));
    }
    Ok(max as f64)
}

/// Max-based scale over f64 values; `name` only labels the error.
pub(crate) fn max_scale_values(values: &[f64], name: &str) -> Result<f64> {
    let max = values.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()));
    if max == 0.0 {
        return Err(Error::degenerate(name, "all elements are zero, scale would be 0"));
    }
    Ok(max)
}

/// Closed-form scale minimizing `Σ (sign_i·2^(q_i)·S - v_i)^2` for a fixed
/// assignment: `S = Σ(2^(q_i)·|v_i|) / Σ 4^(q_i)`.
pub fn refit_scale(t: &Tensor, assignment: &QuantizedTensor) -> Result<f64> {
    if t.shape() != assignment.shape() {
        return Err(Error::validation(format!(
            "shape mismatch: tensor {:?} vs assignment {:?}",
            t.shape(),
            assignment.shape()
        )));
    }
    let values: Vec<f64> = t.data().iter().map(|&v| v as f64).collect();
    Ok(refit_values(&values, assignment.codes(), assignment.bits()))
}

pub(crate) fn refit_values(values: &[f64], codes: &[u8], bits: u8) -> f64 {
    debug_assert_eq!(values.len(), codes.len());
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (&v, &c) in values.iter().zip(codes) {
        let q = -(code_magnitude(c, bits) as i32);
        num += exp2i(q) * v.abs();
        den += exp2i(2 * q);
    }
    debug_assert!(den > 0.0);
    num / den
}

/// SSE of the reconstruction `sign_i·2^(q_i)·S` for a fixed assignment.
pub(crate) fn assignment_sse_values(values: &[f64], codes: &[u8], bits: u8, scale: f64) -> f64 {
    values
        .iter()
        .zip(codes)
        .map(|(&v, &c)| {
            let q = -(code_magnitude(c, bits) as i32);
            let a = exp2i(q) * if code_is_negative(c, bits) { -1.0 } else { 1.0 };
            let e = a * scale - v;
            e * e
        })
        .sum()
}

#[cfg(test)]
fn assignment_sse(t: &Tensor, assignment: &QuantizedTensor, scale: f64) -> f64 {
    let values: Vec<f64> = t.data().iter().map(|&v| v as f64).collect();
    assignment_sse_values(&values, assignment.codes(), assignment.bits(), scale)
}

/// EM fit starting from the max-based scale.
pub fn em_fit_scale(t: &Tensor, bits: u8, tol: f64, max_iter: usize) -> Result<ScaleFitReport> {
    let start = max_scale(t)?;
    em_fit_scale_from(t, bits, start, tol, max_iter)
}

/// EM fit from an explicit starting scale; used to warm-start during
/// retraining.
pub fn em_fit_scale_from(
    t: &Tensor,
    bits: u8,
    start: f64,
    tol: f64,
    max_iter: usize,
) -> Result<ScaleFitReport> {
    let values: Vec<f64> = t.data().iter().map(|&v| v as f64).collect();
    em_fit_values(&values, bits, start, tol, max_iter)
}

pub(crate) fn em_fit_values(
    values: &[f64],
    bits: u8,
    start: f64,
    tol: f64,
    max_iter: usize,
) -> Result<ScaleFitReport> {
    codec::validate_bits(bits)?;
    if max_iter == 0 {
        return Err(Error::validation("max_iter must be >= 1"));
    }
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(Error::validation(format!("tol must be > 0, got {tol}")));
    }
    if !(start > 0.0 && start.is_finite()) {
        return Err(Error::validation(format!("starting scale must be > 0, got {start}")));
    }

    let mut scale = start;
    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..max_iter {
        let codes = codec::encode_slice_f64(values.iter().copied(), scale, bits)?;
        let next = refit_values(values, &codes, bits);
        trace.push(assignment_sse_values(values, &codes, bits, next));
        let rel = (next - scale).abs() / scale;
        scale = next;
        if rel < tol {
            converged = true;
            break;
        }
    }
    Ok(ScaleFitReport { scale, iterations: trace.len(), sse_trace: trace, converged })
}
