//! Exact binary arithmetic helpers.
//!
//! The codec and the quantized dot products only ever deal in signs, powers
//! of two, and 24-bit scale mantissas, so every intermediate quantity is a
//! dyadic rational. This module provides the few primitives needed to keep
//! that arithmetic exact end to end:
//!
//! * [`exp2i`] / [`floor_log2`] — powers of two and exponent extraction
//!   without trusting `f64::log2` rounding,
//! * fixed-width unsigned big integers for shift-add accumulation,
//! * a correctly rounded (round-to-nearest-even) conversion from a wide
//!   integer times a power of two back to `f64`.

/// 2^e as an exact `f64`, for any exponent representable in `f64`
/// (including the subnormal range). Out-of-range exponents saturate to
/// `0.0` / `INFINITY`.
pub fn exp2i(e: i32) -> f64 {
    if (-1022..=1023).contains(&e) {
        f64::from_bits(((e + 1023) as u64) << 52)
    } else if (-1074..-1022).contains(&e) {
        f64::from_bits(1u64 << (e + 1074))
    } else if e > 1023 {
        f64::INFINITY
    } else {
        0.0
    }
}

/// floor(log2(x)) for finite x > 0, computed from the bit pattern.
///
/// Unlike `x.log2().floor()` this can never mis-round near powers of two.
pub fn floor_log2(x: f64) -> i32 {
    debug_assert!(x > 0.0 && x.is_finite());
    let bits = x.to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i32;
    if biased != 0 {
        biased - 1023
    } else {
        // Subnormal: shift into the normal range first.
        let scaled = x * exp2i(64);
        let b = ((scaled.to_bits() >> 52) & 0x7ff) as i32;
        b - 1023 - 64
    }
}

/// Decompose a finite nonzero `f64` into `(negative, mantissa, lsb_exp)`
/// with `value = ±mantissa · 2^lsb_exp` exactly and `mantissa < 2^53`.
pub fn split_f64(x: f64) -> (bool, u64, i32) {
    debug_assert!(x.is_finite() && x != 0.0);
    let bits = x.to_bits();
    let neg = bits >> 63 == 1;
    let biased = ((bits >> 52) & 0x7ff) as i32;
    let frac = bits & ((1u64 << 52) - 1);
    if biased == 0 {
        (neg, frac, -1074)
    } else {
        (neg, frac | (1u64 << 52), biased - 1023 - 52)
    }
}

/// Round `±(limbs as integer) · 2^lsb_exp` to the nearest `f64`, ties to
/// even. `limbs` is little-endian base-2^64.
pub fn round_limbs_to_f64(limbs: &[u64], negative: bool, lsb_exp: i32) -> f64 {
    // Highest set bit position, or zero result.
    let mut high = None;
    for (i, &limb) in limbs.iter().enumerate().rev() {
        if limb != 0 {
            high = Some(i * 64 + (63 - limb.leading_zeros() as usize));
            break;
        }
    }
    let Some(h) = high else {
        return 0.0;
    };

    let bit = |pos: usize| -> u64 { (limbs[pos / 64] >> (pos % 64)) & 1 };

    let magnitude;
    let exp;
    if h <= 52 {
        // Fits the mantissa exactly.
        magnitude = limbs[0] as f64;
        exp = lsb_exp;
    } else {
        // Take the top 53 bits, round on the guard bit with sticky.
        let shift = h - 52;
        let mut top: u64 = 0;
        for pos in (shift..=h).rev() {
            top = (top << 1) | bit(pos);
        }
        let guard = bit(shift - 1) == 1;
        let mut sticky = false;
        if guard {
            // Sticky = any bit below the guard.
            'outer: for pos in 0..shift - 1 {
                if bit(pos) == 1 {
                    sticky = true;
                    break 'outer;
                }
            }
        }
        if guard && (sticky || top & 1 == 1) {
            top += 1;
        }
        if top == 1u64 << 53 {
            top >>= 1;
            magnitude = top as f64;
            exp = lsb_exp + shift as i32 + 1;
        } else {
            magnitude = top as f64;
            exp = lsb_exp + shift as i32;
        }
    }
    let value = magnitude * exp2i(exp);
    if negative {
        -value
    } else {
        value
    }
}

/// Error-free transformation of `a + b` into `(sum, err)` with
/// `sum + err == a + b` exactly (Knuth's two-sum).
pub fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bv = s - a;
    let err = (a - (s - bv)) + (b - bv);
    (s, err)
}

// ---------------------------------------------------------------------------
// Fixed-width unsigned accumulators
// ---------------------------------------------------------------------------

/// Little-endian fixed-width unsigned integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WideUint<const L: usize> {
    pub limbs: [u64; L],
}

impl<const L: usize> WideUint<L> {
    pub const ZERO: Self = WideUint { limbs: [0; L] };

    /// Add 2^bit. `bit` must be below the width with headroom for carries.
    pub fn add_pow2(&mut self, bit: usize) {
        debug_assert!(bit < L * 64);
        let mut idx = bit / 64;
        let mut carry = 1u64 << (bit % 64);
        while carry != 0 {
            debug_assert!(idx < L, "accumulator overflow");
            let (sum, overflow) = self.limbs[idx].overflowing_add(carry);
            self.limbs[idx] = sum;
            carry = overflow as u64;
            idx += 1;
        }
    }

    /// Add `mantissa << shift` where `mantissa < 2^53`.
    pub fn add_shifted(&mut self, mantissa: u64, shift: usize) {
        debug_assert!(shift < L * 64);
        let idx = shift / 64;
        let off = shift % 64;
        let wide = (mantissa as u128) << off;
        let mut carry_lo = wide as u64;
        let mut carry_hi = (wide >> 64) as u64;
        let mut i = idx;
        while carry_lo != 0 || carry_hi != 0 {
            debug_assert!(i < L, "accumulator overflow");
            let (sum, overflow) = self.limbs[i].overflowing_add(carry_lo);
            self.limbs[i] = sum;
            carry_lo = carry_hi + overflow as u64;
            carry_hi = 0;
            i += 1;
        }
    }

    /// self >= other
    pub fn ge(&self, other: &Self) -> bool {
        for i in (0..L).rev() {
            if self.limbs[i] != other.limbs[i] {
                return self.limbs[i] > other.limbs[i];
            }
        }
        true
    }

    /// self - other, requiring self >= other.
    pub fn sub(&self, other: &Self) -> Self {
        debug_assert!(self.ge(other));
        let mut out = [0u64; L];
        let mut borrow = 0u64;
        for i in 0..L {
            let (d1, b1) = self.limbs[i].overflowing_sub(other.limbs[i]);
            let (d2, b2) = d1.overflowing_sub(borrow);
            out[i] = d2;
            borrow = (b1 as u64) + (b2 as u64);
        }
        debug_assert_eq!(borrow, 0);
        WideUint { limbs: out }
    }

    /// Widening multiply by a u64, producing one extra limb.
    pub fn mul_u64(&self, m: u64) -> Vec<u64> {
        let mut out = vec![0u64; L + 1];
        let mut carry = 0u128;
        for i in 0..L {
            let prod = self.limbs[i] as u128 * m as u128 + carry;
            out[i] = prod as u64;
            carry = prod >> 64;
        }
        out[L] = carry as u64;
        out
    }
}

/// Signed difference of two magnitudes: returns (negative, |p - n|).
pub fn signed_diff<const L: usize>(p: &WideUint<L>, n: &WideUint<L>) -> (bool, WideUint<L>) {
    if p.ge(n) {
        (false, p.sub(n))
    } else {
        (true, n.sub(p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp2i_matches_bit_patterns() {
        assert_eq!(exp2i(0), 1.0);
        assert_eq!(exp2i(1), 2.0);
        assert_eq!(exp2i(-1), 0.5);
        assert_eq!(exp2i(-7), 1.0 / 128.0);
        assert_eq!(exp2i(-1022), f64::MIN_POSITIVE);
        assert_eq!(exp2i(-1074), f64::from_bits(1));
        assert_eq!(exp2i(1023), f64::MAX / (2.0 - f64::EPSILON));
        assert_eq!(exp2i(1024), f64::INFINITY);
        assert_eq!(exp2i(-1075), 0.0);
    }

    #[test]
    fn floor_log2_exact_on_powers_and_neighbors() {
        for e in -1074..=1023 {
            let x = exp2i(e);
            assert_eq!(floor_log2(x), e, "2^{e}");
        }
        assert_eq!(floor_log2(5.8), 2);
        assert_eq!(floor_log2(0.9999999), -1);
        assert_eq!(floor_log2(1.0000001), 0);
        assert_eq!(floor_log2(3.0), 1);
    }

    #[test]
    fn split_f64_reconstructs() {
        for &x in &[1.0, -2.5, 0.7, 5.8e-300, -3.1e300, f64::from_bits(7)] {
            let (neg, m, e) = split_f64(x);
            let rebuilt = (m as f64) * exp2i(e) * if neg { -1.0 } else { 1.0 };
            assert_eq!(rebuilt.to_bits(), x.to_bits(), "{x}");
        }
    }

    #[test]
    fn round_limbs_matches_primitive_casts() {
        // u64 and u128 `as f64` casts round to nearest, ties to even.
        let cases: Vec<u64> = vec![
            0,
            1,
            (1 << 53) - 1,
            (1 << 53) + 1,
            (1 << 53) + 2,
            (1 << 53) + 3,
            u64::MAX,
            0x9e3779b97f4a7c15,
        ];
        for &v in &cases {
            let got = round_limbs_to_f64(&[v], false, 0);
            assert_eq!(got.to_bits(), (v as f64).to_bits(), "{v}");
        }
        let mut state = 0x243f6a8885a308d3u64;
        for _ in 0..20_000 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let lo = state;
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let hi = state >> (state % 64);
            let v = ((hi as u128) << 64) | lo as u128;
            let got = round_limbs_to_f64(&[lo, hi], false, 0);
            assert_eq!(got.to_bits(), (v as f64).to_bits(), "{v:#x}");
            let gotn = round_limbs_to_f64(&[lo, hi], true, 0);
            assert_eq!(gotn.to_bits(), (-(v as f64)).to_bits(), "-{v:#x}");
        }
    }

    #[test]
    fn round_limbs_applies_exponent() {
        let got = round_limbs_to_f64(&[3, 0, 0], false, -1);
        assert_eq!(got, 1.5);
        let got = round_limbs_to_f64(&[0, 1], false, -64);
        assert_eq!(got, 1.0);
        // Mantissa overflow on round-up: 2^54 - 1 rounds to 2^54.
        let got = round_limbs_to_f64(&[(1 << 54) - 1], false, 0);
        assert_eq!(got, ((1u64 << 54) - 1) as f64);
    }

    #[test]
    fn two_sum_is_error_free() {
        // Pairs whose naive sum rounds; the error term must recover it.
        let cases = [
            (1.0, f64::EPSILON / 2.0),
            (1e16, 1.0),
            (0.1, 0.2),
            (2.0f64.powi(-60), 1.0 / 128.0),
            (-1.0, 1.0 + f64::EPSILON),
        ];
        for (a, b) in cases {
            let (s, e) = two_sum(a, b);
            assert_eq!(s, a + b);
            // Verify exactness by splitting through integers where possible.
            let direct = (a + b) - s;
            assert!(e == e && (e - direct).abs() <= e.abs());
            // s + e reconstructs a + b when added in exact rational terms:
            // since |e| < ulp(s)/2, s is the rounded sum and e the residue.
            assert!(e.abs() <= (s * f64::EPSILON).abs().max(f64::MIN_POSITIVE));
        }
        // Exhaustive-style check on dyadic pairs where the exact sum is
        // representable in i128 space.
        for i in 0..1000i64 {
            let a = (i * 7919 % 4093 - 2048) as f64 * 0.5f64.powi(20);
            let b = (i * 104729 % 8191 - 4096) as f64 * 0.5f64.powi(3);
            let (s, e) = two_sum(a, b);
            // All quantities are multiples of 2^-20 within i128 range.
            let to_units = |x: f64| (x * 2.0f64.powi(20)).round() as i128;
            assert_eq!(to_units(s) + to_units(e), to_units(a) + to_units(b));
        }
    }

    #[test]
    fn wide_add_sub_roundtrip() {
        let mut a = WideUint::<5>::ZERO;
        a.add_pow2(0);
        a.add_pow2(64);
        a.add_pow2(64); // carry into limb 2 via repeated add
        assert_eq!(a.limbs, [1, 2, 0, 0, 0]);
        a.add_shifted((1 << 53) - 1, 60);
        let mut b = WideUint::<5>::ZERO;
        b.add_shifted((1 << 53) - 1, 60);
        let diff = a.sub(&b);
        assert_eq!(diff.limbs, [1, 2, 0, 0, 0]);
        let (neg, d) = signed_diff(&b, &a);
        assert!(neg);
        assert_eq!(d.limbs, [1, 2, 0, 0, 0]);
    }

    #[test]
    fn wide_carry_chain() {
        let mut a = WideUint::<3>::ZERO;
        for _ in 0..2 {
            a.add_shifted(u64::MAX >> 11, 11);
        }
        // 2 * (2^64 - 2^11) = 2^65 - 2^12
        assert_eq!(a.limbs, [u64::MAX - 4095, 1, 0]);
    }

    #[test]
    fn mul_u64_widens() {
        let mut a = WideUint::<2>::ZERO;
        a.add_pow2(127);
        let prod = a.mul_u64(3);
        // 3 * 2^127 = 2^128 + 2^127
        assert_eq!(prod, vec![0, 1 << 63, 1]);
    }
}
