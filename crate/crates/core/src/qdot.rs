//! Quantized dot products and the straight-through-estimator backward pass.
//!
//! Two forward paths compute the same product of log-quantized operands:
//!
//! * [`qdot_reference`] decodes both operands and multiplies — the semantic
//!   definition. Element products are accumulated in a fixed-point (Kulisch)
//!   accumulator wide enough to be exact, then rounded once.
//! * [`qdot_shift`] never decodes: every term is `±2^(q_a+q_w)` shifted into
//!   a wide integer accumulator, with the scales applied in a single final
//!   multiplication.
//!
//! Every term is a dyadic rational and both accumulators are exact, so the
//! two paths agree bit for bit: each returns the correctly rounded value of
//! the mathematically exact product.

use crate::codec::{
    code_is_negative, code_magnitude, encode, max_magnitude, min_exponent, QuantizedTensor,
};
use crate::error::{Error, Result};
use crate::scale::max_scale;
use crate::tensor::Tensor;
use crate::wide::{exp2i, round_limbs_to_f64, signed_diff, split_f64, WideUint};

/// Scale selection for on-the-fly activation quantization. EM is deliberately
/// unavailable here: fitting before every product would dominate the cost of
/// the product itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActScaleMode {
    Max,
    Fixed(f64),
}

/// Activation quantization knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActQuantConfig {
    pub bits: u8,
    pub scale_mode: ActScaleMode,
}

impl ActQuantConfig {
    pub fn validate(&self) -> Result<()> {
        crate::codec::validate_bits(self.bits)?;
        if let ActScaleMode::Fixed(s) = self.scale_mode {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::validation(format!("fixed activation scale must be > 0, got {s}")));
            }
        }
        Ok(())
    }
}

/// Result of quantizing activations, with the degenerate-input flag.
#[derive(Debug, Clone, PartialEq)]
pub struct ActQuantResult {
    pub tensor: QuantizedTensor,
    /// True when an all-zero input forced the documented `S = 1` fallback.
    pub degenerate_fallback: bool,
}

/// Quantize activations entering a matrix multiplication.
///
/// Max mode guarantees the largest element maps to `q = 0` exactly (no
/// strict clip at the upper bound). All-zero input under max mode falls back
/// to `S = 1` rather than erroring: zero activations occur legitimately.
pub fn quantize_activations(x: &Tensor, cfg: &ActQuantConfig) -> Result<ActQuantResult> {
    cfg.validate()?;
    let (scale, degenerate) = match cfg.scale_mode {
        ActScaleMode::Fixed(s) => (s, false),
        ActScaleMode::Max => match max_scale(x) {
            Ok(s) => (s, false),
            Err(Error::Degenerate { .. }) => (1.0, true),
            Err(e) => return Err(e),
        },
    };
    Ok(ActQuantResult { tensor: encode(x, scale, cfg.bits)?, degenerate_fallback: degenerate })
}

// ---------------------------------------------------------------------------
// Shapes
// ---------------------------------------------------------------------------

struct MatDims {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
}

/// Interpret operand shapes as a matrix product. 1-D left operands are rows,
/// 1-D right operands are columns.
fn matmul_dims(a_shape: &[usize], w_shape: &[usize]) -> Result<MatDims> {
    let (m, k_a, a_vec) = match a_shape {
        [k] => (1, *k, true),
        [m, k] => (*m, *k, false),
        _ => {
            return Err(Error::validation(format!(
                "left operand must be 1-D or 2-D, got shape {a_shape:?}"
            )))
        }
    };
    let (k_w, n, w_vec) = match w_shape {
        [k] => (*k, 1, true),
        [k, n] => (*k, *n, false),
        _ => {
            return Err(Error::validation(format!(
                "right operand must be 1-D or 2-D, got shape {w_shape:?}"
            )))
        }
    };
    if k_a != k_w {
        return Err(Error::validation(format!(
            "inner dimensions disagree: {a_shape:?} x {w_shape:?}"
        )));
    }
    let out_shape = match (a_vec, w_vec) {
        (true, true) => vec![1],
        (true, false) => vec![n],
        (false, true) => vec![m],
        (false, false) => vec![m, n],
    };
    Ok(MatDims { m, k: k_a, n, out_shape })
}

// ---------------------------------------------------------------------------
// Reference path: decode + exact fixed-point accumulation
// ---------------------------------------------------------------------------

// Kulisch accumulator coverage. Decoded entries are at least 2^-276 in
// magnitude, so element products sit at or above 2^-552 and their mantissa
// bits at or above 2^-605.
const KULISCH_BASE_EXP: i32 = -608;
const KULISCH_LIMBS: usize = 16;

/// Decode both operands to full precision and matrix-multiply.
///
/// The per-element sums are formed exactly and rounded once, so the result
/// is the correctly rounded value of the true product.
pub fn qdot_reference(a: &QuantizedTensor, w: &QuantizedTensor) -> Result<Tensor> {
    let dims = matmul_dims(a.shape(), w.shape())?;
    let a_dec = a.decode_f64();
    let w_dec = w.decode_f64();
    let mut out = Vec::with_capacity(dims.m * dims.n);
    for i in 0..dims.m {
        for j in 0..dims.n {
            let mut pos = WideUint::<KULISCH_LIMBS>::ZERO;
            let mut neg = WideUint::<KULISCH_LIMBS>::ZERO;
            for k in 0..dims.k {
                let prod = a_dec[i * dims.k + k] * w_dec[k * dims.n + j];
                if prod == 0.0 {
                    continue;
                }
                let (is_neg, mantissa, lsb_exp) = split_f64(prod);
                let shift = (lsb_exp - KULISCH_BASE_EXP) as usize;
                if is_neg {
                    neg.add_shifted(mantissa, shift);
                } else {
                    pos.add_shifted(mantissa, shift);
                }
            }
            let (negative, magnitude) = signed_diff(&pos, &neg);
            out.push(round_limbs_to_f64(&magnitude.limbs, negative, KULISCH_BASE_EXP) as f32);
        }
    }
    Tensor::new("qdot", dims.out_shape, out)
}

// ---------------------------------------------------------------------------
// Shift path: integer accumulation of code products
// ---------------------------------------------------------------------------

const SHIFT_ACC_BITS: u32 = 320;
const SHIFT_ACC_LIMBS: usize = (SHIFT_ACC_BITS / 64) as usize;

/// Does the shift accumulator hold `inner` terms of at most `2^k_max` each?
pub(crate) fn shift_capacity_ok(k_max: u32, inner: u128) -> bool {
    let n_bits = 128 - inner.leading_zeros();
    k_max + n_bits <= SHIFT_ACC_BITS
}

/// Multiply without decoding: each term contributes `±2^(q_a + q_w + K)` to
/// an integer accumulator (`K` biases every exponent positive), and the
/// scales multiply in once at the end.
///
/// Bit-identical to [`qdot_reference`]. The 320-bit accumulator absorbs any
/// inner dimension addressable on a 64-bit machine even at `B = 8` for both
/// operands (worst case `K = 254`, leaving 66 doubling steps); the capacity
/// check guards the invariant rather than a reachable configuration.
pub fn qdot_shift(a: &QuantizedTensor, w: &QuantizedTensor) -> Result<Tensor> {
    let dims = matmul_dims(a.shape(), w.shape())?;
    let mag_a = max_magnitude(a.bits()) as u32;
    let mag_w = max_magnitude(w.bits()) as u32;
    let bias = mag_a + mag_w; // K: largest possible biased exponent
    if !shift_capacity_ok(bias, dims.k as u128) {
        return Err(Error::Capacity(format!(
            "inner dimension {} with bit widths ({}, {}) exceeds the {}-bit accumulator",
            dims.k,
            a.bits(),
            w.bits(),
            SHIFT_ACC_BITS
        )));
    }

    // S_a·S_w is a product of two f32 values: exact in f64.
    let scale_product = a.scale() as f64 * w.scale() as f64;
    let (_, scale_mantissa, scale_exp) = split_f64(scale_product);

    let bits_a = a.bits();
    let bits_w = w.bits();
    let a_codes = a.codes();
    let w_codes = w.codes();
    let mut out = Vec::with_capacity(dims.m * dims.n);
    for i in 0..dims.m {
        for j in 0..dims.n {
            let mut pos = WideUint::<SHIFT_ACC_LIMBS>::ZERO;
            let mut neg = WideUint::<SHIFT_ACC_LIMBS>::ZERO;
            for k in 0..dims.k {
                let ca = a_codes[i * dims.k + k];
                let cw = w_codes[k * dims.n + j];
                let exponent = (mag_a - code_magnitude(ca, bits_a) as u32)
                    + (mag_w - code_magnitude(cw, bits_w) as u32);
                if code_is_negative(ca, bits_a) != code_is_negative(cw, bits_w) {
                    neg.add_pow2(exponent as usize);
                } else {
                    pos.add_pow2(exponent as usize);
                }
            }
            let (negative, magnitude) = signed_diff(&pos, &neg);
            let widened = magnitude.mul_u64(scale_mantissa);
            out.push(round_limbs_to_f64(&widened, negative, scale_exp - bias as i32) as f32);
        }
    }
    Tensor::new("qdot", dims.out_shape, out)
}

// ---------------------------------------------------------------------------
// Straight-through estimator
// ---------------------------------------------------------------------------

/// The STE derivative of the quantization function at input `v`:
/// 1 inside the clipping range `2^(1-2^(B-1)) <= |v|/S <= 1` (both bounds
/// inclusive), 0 outside.
pub fn ste_mask(v: f64, scale: f64, bits: u8) -> bool {
    let t = v.abs() / scale;
    t >= exp2i(min_exponent(bits)) && t <= 1.0
}

/// Multiply the upstream gradient by the STE mask evaluated on the
/// original (pre-quantization) inputs.
pub fn ste_backward(
    upstream_grad: &Tensor,
    original_inputs: &Tensor,
    scale: f64,
    bits: u8,
) -> Result<Tensor> {
    crate::codec::validate_bits(bits)?;
    if upstream_grad.shape() != original_inputs.shape() {
        return Err(Error::validation(format!(
            "shape mismatch: gradient {:?} vs inputs {:?}",
            upstream_grad.shape(),
            original_inputs.shape()
        )));
    }
    let data = upstream_grad
        .data()
        .iter()
        .zip(original_inputs.data())
        .map(|(&g, &v)| if ste_mask(v as f64, scale, bits) { g } else { 0.0 })
        .collect();
    Tensor::new(upstream_grad.name(), upstream_grad.shape().to_vec(), data)
}

// ---------------------------------------------------------------------------
// Composite forward/backward
// ---------------------------------------------------------------------------

/// A quantized matrix product with everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct QDotResult {
    pub values: Tensor,
    saved: SavedForBackward,
}

#[derive(Debug, Clone)]
struct SavedForBackward {
    mask_a: Vec<f32>,
    mask_w: Vec<f32>,
    a_decoded: Vec<f64>,
    w_decoded: Vec<f64>,
    a_shape: Vec<usize>,
    w_shape: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
}

/// Forward product of two quantized operands, remembering the STE masks of
/// their pre-quantization inputs.
pub fn qdot_with_grad(
    a_original: &Tensor,
    a: &QuantizedTensor,
    w_original: &Tensor,
    w: &QuantizedTensor,
) -> Result<QDotResult> {
    if a_original.shape() != a.shape() || w_original.shape() != w.shape() {
        return Err(Error::validation("original inputs must match quantized shapes"));
    }
    let dims = matmul_dims(a.shape(), w.shape())?;
    let values = qdot_shift(a, w)?;
    let mask = |orig: &Tensor, qt: &QuantizedTensor| -> Vec<f32> {
        orig.data()
            .iter()
            .map(|&v| ste_mask(v as f64, qt.scale() as f64, qt.bits()) as u8 as f32)
            .collect()
    };
    Ok(QDotResult {
        values,
        saved: SavedForBackward {
            mask_a: mask(a_original, a),
            mask_w: mask(w_original, w),
            a_decoded: a.decode_f64(),
            w_decoded: w.decode_f64(),
            a_shape: a.shape().to_vec(),
            w_shape: w.shape().to_vec(),
            m: dims.m,
            k: dims.k,
            n: dims.n,
        },
    })
}

/// Backward pass: plain matrix-product gradients through the decoded
/// operands, masked by each input's STE indicator.
pub fn qdot_backward(result: &QDotResult, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
    let s = &result.saved;
    if upstream.shape() != result.values.shape() {
        return Err(Error::validation(format!(
            "upstream shape {:?} does not match output shape {:?}",
            upstream.shape(),
            result.values.shape()
        )));
    }
    let g = upstream.data();
    let mut grad_a = vec![0.0f32; s.m * s.k];
    for i in 0..s.m {
        for kk in 0..s.k {
            let mut acc = 0.0f64;
            for j in 0..s.n {
                acc += g[i * s.n + j] as f64 * s.w_decoded[kk * s.n + j];
            }
            grad_a[i * s.k + kk] = (acc as f32) * s.mask_a[i * s.k + kk];
        }
    }
    let mut grad_w = vec![0.0f32; s.k * s.n];
    for kk in 0..s.k {
        for j in 0..s.n {
            let mut acc = 0.0f64;
            for i in 0..s.m {
                acc += s.a_decoded[i * s.k + kk] * g[i * s.n + j] as f64;
            }
            grad_w[kk * s.n + j] = (acc as f32) * s.mask_w[kk * s.n + j];
        }
    }
    Ok((
        Tensor::new("grad_a", s.a_shape.clone(), grad_a)?,
        Tensor::new("grad_w", s.w_shape.clone(), grad_w)?,
    ))
}
