//! Logarithmic (power-of-two) quantization and the linear baseline codec.
//!
//! Values quantize to centers of the form `±S·2^q` with one positive scale
//! `S` per tensor and `q` an integer in `(-2^(B-1), 0]`. A code stores the
//! sign in the top bit and the magnitude `m = -q` in the remaining `B-1`
//! bits. Rounding picks the nearest center in normal space, not log space:
//! e.g. with `S = 1`, the value 5.8 is nearer to 4 than to 8 even though
//! `log2(5.8)` rounds to 3. Exact midpoints (`1.5·2^q`) round down.
//!
//! All rounding decisions are made with exact bit-level arithmetic; no
//! result ever depends on the platform's `log2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wide::{exp2i, floor_log2};

/// How the per-tensor scale is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ScaleStrategy {
    /// A caller-supplied constant scale.
    Fixed(f64),
    /// The tensor's maximum absolute value.
    Max,
    /// Expectation-maximization fit minimizing the squared error.
    Em { tol: f64, max_iter: usize },
}

impl ScaleStrategy {
    /// Default EM settings: relative-change tolerance 1e-6, 50 iterations.
    pub fn em_default() -> Self {
        ScaleStrategy::Em { tol: 1e-6, max_iter: 50 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ScaleStrategy::Fixed(s) => {
                if !(s > 0.0 && s.is_finite()) {
                    return Err(Error::validation(format!("fixed scale must be > 0, got {s}")));
                }
            }
            ScaleStrategy::Em { tol, max_iter } => {
                if !(tol > 0.0 && tol.is_finite()) {
                    return Err(Error::validation(format!("EM tolerance must be > 0, got {tol}")));
                }
                if max_iter == 0 {
                    return Err(Error::validation("EM max_iter must be >= 1"));
                }
            }
            ScaleStrategy::Max => {}
        }
        Ok(())
    }
}

/// All quantization knobs in one place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    /// Stored bits per value, including the sign bit. 1..=8.
    pub bits: u8,
    pub scale_strategy: ScaleStrategy,
    /// Store tensors matching the bias rule in full precision.
    pub keep_biases: bool,
    /// Substring that marks a tensor as a bias.
    pub bias_rule: String,
    /// Explicit tensor names forced to full precision regardless of the rule.
    pub passthrough_overrides: Vec<String>,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            bits: 4,
            scale_strategy: ScaleStrategy::em_default(),
            keep_biases: true,
            bias_rule: "bias".to_string(),
            passthrough_overrides: Vec::new(),
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        validate_bits(self.bits)?;
        self.scale_strategy.validate()
    }

    /// Should this tensor bypass quantization?
    pub fn is_passthrough(&self, name: &str) -> bool {
        self.keep_biases
            && (name.contains(self.bias_rule.as_str())
                || self.passthrough_overrides.iter().any(|n| n == name))
    }
}

pub(crate) fn validate_bits(bits: u8) -> Result<()> {
    if !(1..=8).contains(&bits) {
        return Err(Error::domain(format!("bits must be in 1..=8, got {bits}")));
    }
    Ok(())
}

/// Smallest representable exponent for a bit width: `1 - 2^(B-1)`.
pub fn min_exponent(bits: u8) -> i32 {
    1 - (1i32 << (bits - 1))
}

/// Largest magnitude field for a bit width: `2^(B-1) - 1`.
pub fn max_magnitude(bits: u8) -> u8 {
    ((1u16 << (bits - 1)) - 1) as u8
}

/// Compose a code byte: sign in the top bit, magnitude `m = -q` below.
pub fn make_code(negative: bool, magnitude: u8, bits: u8) -> u8 {
    debug_assert!(magnitude <= max_magnitude(bits));
    ((negative as u8) << (bits - 1)) | magnitude
}

/// Sign bit of a code (true = negative).
pub fn code_is_negative(code: u8, bits: u8) -> bool {
    code >> (bits - 1) & 1 == 1
}

/// Magnitude field of a code.
pub fn code_magnitude(code: u8, bits: u8) -> u8 {
    code & max_magnitude(bits)
}

/// A log-quantized tensor: one scale plus one `B`-bit code per element.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    name: String,
    shape: Vec<usize>,
    scale: f32,
    bits: u8,
    codes: Vec<u8>,
}

impl QuantizedTensor {
    pub fn new(
        name: impl Into<String>,
        shape: Vec<usize>,
        scale: f32,
        bits: u8,
        codes: Vec<u8>,
    ) -> Result<Self> {
        let name = name.into();
        validate_bits(bits)?;
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::validation(format!(
                "tensor '{name}': scale must be positive and finite, got {scale}"
            )));
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::validation(format!("tensor '{name}': shape overflows")))?;
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::validation(format!(
                "tensor '{name}': shape must be non-empty with positive dims"
            )));
        }
        if count != codes.len() {
            return Err(Error::validation(format!(
                "tensor '{name}': shape {shape:?} implies {count} codes, got {}",
                codes.len()
            )));
        }
        let limit = 1u16 << bits;
        if let Some(idx) = codes.iter().position(|&c| (c as u16) >= limit) {
            return Err(Error::validation(format!(
                "tensor '{name}': code {} at index {idx} exceeds {bits}-bit range",
                codes[idx]
            )));
        }
        Ok(QuantizedTensor { name, shape, scale, bits, codes })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Decode to exact f64 values (`±S·2^(-m)` is always representable).
    pub fn decode_f64(&self) -> Vec<f64> {
        let scale = self.scale as f64;
        self.codes
            .iter()
            .map(|&c| {
                let v = scale * exp2i(-(code_magnitude(c, self.bits) as i32));
                if code_is_negative(c, self.bits) {
                    -v
                } else {
                    v
                }
            })
            .collect()
    }
}

/// Exponent of the power of two nearest to `x` in normal space.
///
/// Exact midpoints (`x = 1.5·2^q`) round down, so 6.0 maps to 2 (center 4).
pub fn nearest_pow2_exponent(x: f64) -> Result<i32> {
    if !(x > 0.0 && x.is_finite()) {
        return Err(Error::domain(format!("nearest_pow2_exponent requires finite x > 0, got {x}")));
    }
    Ok(nearest_pow2_exponent_raw(x))
}

/// Rounding core; caller guarantees `x > 0` finite.
fn nearest_pow2_exponent_raw(x: f64) -> i32 {
    let q = floor_log2(x);
    // x / 2^q is an exact division onto [1, 2); round up iff it exceeds 1.5.
    let mantissa = x / exp2i(q);
    if mantissa > 1.5 {
        q + 1
    } else {
        q
    }
}

/// Encode one already-absolute, already-clipped ratio `t in [2^min_exp, 1]`.
fn exponent_for_clipped(t: f64, min_exp: i32) -> i32 {
    // The clamp is a guard for the type invariant; analytically the result
    // is already inside (min_exp - 1, 0].
    nearest_pow2_exponent_raw(t).clamp(min_exp, 0)
}

pub(crate) fn encode_value(v: f64, scale: f64, bits: u8) -> Result<u8> {
    if v.is_nan() {
        return Err(Error::data("cannot encode NaN"));
    }
    let negative = v < 0.0;
    let min_exp = min_exponent(bits);
    let t = (v.abs() / scale).clamp(exp2i(min_exp), 1.0);
    let q = exponent_for_clipped(t, min_exp);
    Ok(make_code(negative, (-q) as u8, bits))
}

/// Quantize a tensor with the given scale and bit width.
///
/// The scale is rounded to f32 first (the stored precision) and every
/// rounding decision is made against that value, so decode sees exactly the
/// scale that encode used.
pub fn encode(t: &Tensor, scale: f64, bits: u8) -> Result<QuantizedTensor> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::domain(format!("scale must be positive and finite, got {scale}")));
    }
    let stored = scale as f32;
    if !(stored > 0.0 && stored.is_finite()) {
        return Err(Error::domain(format!("scale {scale} is not representable as f32")));
    }
    let codes = encode_slice_f64(t.data().iter().map(|&v| v as f64), stored as f64, bits)?;
    QuantizedTensor::new(t.name(), t.shape().to_vec(), stored, bits, codes)
}

/// Encode from f64 values; used by the training loop where parameters are
/// carried at full double precision between steps.
pub(crate) fn encode_slice_f64(
    values: impl Iterator<Item = f64>,
    scale: f64,
    bits: u8,
) -> Result<Vec<u8>> {
    validate_bits(bits)?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::domain(format!("scale must be positive and finite, got {scale}")));
    }
    values.map(|v| encode_value(v, scale, bits)).collect()
}

/// Reconstruct a full-precision tensor from codes.
pub fn decode(qt: &QuantizedTensor) -> Result<Tensor> {
    let data: Vec<f32> = qt.decode_f64().iter().map(|&v| v as f32).collect();
    Tensor::new(qt.name(), qt.shape().to_vec(), data)
}

/// Sum over elements of the squared reconstruction error.
pub fn quantization_sse(original: &Tensor, qt: &QuantizedTensor) -> Result<f64> {
    if original.shape() != qt.shape() {
        return Err(Error::validation(format!(
            "shape mismatch: original {:?} vs quantized {:?}",
            original.shape(),
            qt.shape()
        )));
    }
    let decoded = qt.decode_f64();
    Ok(original
        .data()
        .iter()
        .zip(decoded.iter())
        .map(|(&v, &d)| {
            let e = d - v as f64;
            e * e
        })
        .sum())
}

// ---------------------------------------------------------------------------
// Linear (fixed-point) baseline
// ---------------------------------------------------------------------------

/// A uniformly quantized tensor, the comparison baseline.
///
/// Codes are `round(clip(v/S, [-1, 1]) · (2^(B-1) - 1))` with ties away from
/// zero; code 0 represents exact zero, which the log codec cannot.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearQuantized {
    name: String,
    shape: Vec<usize>,
    scale: f64,
    bits: u8,
    codes: Vec<i8>,
}

impl LinearQuantized {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Per-element reconstruction `code · S / (2^(B-1) - 1)`.
    pub fn decode_f64(&self) -> Vec<f64> {
        let levels = ((1i32 << (self.bits - 1)) - 1) as f64;
        self.codes.iter().map(|&c| c as f64 * self.scale / levels).collect()
    }
}

/// Symmetric uniform quantization of a tensor.
pub fn linear_encode(t: &Tensor, scale: f64, bits: u8) -> Result<LinearQuantized> {
    validate_bits(bits)?;
    if bits == 1 {
        return Err(Error::domain(
            "linear quantization needs at least 2 bits (no nonzero level exists at B=1)",
        ));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::domain(format!("scale must be positive and finite, got {scale}")));
    }
    let levels = ((1i32 << (bits - 1)) - 1) as f64;
    let codes = t
        .data()
        .iter()
        .map(|&v| ((v as f64 / scale).clamp(-1.0, 1.0) * levels).round() as i8)
        .collect();
    Ok(LinearQuantized { name: t.name().to_string(), shape: t.shape().to_vec(), scale, bits, codes })
}

/// SSE of the linear reconstruction against the original tensor.
pub fn linear_sse(original: &Tensor, lq: &LinearQuantized) -> Result<f64> {
    if original.shape() != lq.shape {
        return Err(Error::validation("shape mismatch in linear_sse"));
    }
    let decoded = lq.decode_f64();
    Ok(original
        .data()
        .iter()
        .zip(decoded.iter())
        .map(|(&v, &d)| {
            let e = d - v as f64;
            e * e
        })
        .sum())
}
