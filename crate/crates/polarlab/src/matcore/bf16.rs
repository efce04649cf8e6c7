//! Emulated bfloat16 rounding on f64 storage.
//!
//! `round_bf16` maps an f64 to the nearest value representable with 8
//! exponent bits and 7 explicit mantissa bits (round-to-nearest-even),
//! widened back to f64. Rounding is done directly on the f64 bit pattern;
//! a detour through f32 would double-round. Values beyond the bf16 range
//! saturate to the largest finite bf16 instead of overflowing to infinity.

use super::DenseMatrix;

/// Largest finite bf16 value, (2 - 2^-7) * 2^127, with exact bits.
pub const BF16_MAX: f64 = f64::from_bits((1150u64 << 52) | (127u64 << 45));

/// Smallest positive bf16 subnormal, 2^-133 (normal as an f64).
const BF16_MIN_SUBNORMAL: f64 = f64::from_bits(890u64 << 52);

const F64_MANT_BITS: u32 = 52;
const BF16_MANT_BITS: u32 = 7;
const DROPPED: u32 = F64_MANT_BITS - BF16_MANT_BITS; // 45

/// Round one value to the nearest bf16 (ties to even), saturating.
pub fn round_bf16(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let sign = if x.is_sign_negative() { -1.0 } else { 1.0 };
    let abs = x.abs();
    if abs == 0.0 {
        return sign * 0.0;
    }
    if abs >= BF16_MAX {
        // Saturation, covering +inf; values between BF16_MAX and the
        // rounding midpoint would clamp under plain RNE anyway.
        return sign * BF16_MAX;
    }
    let bits = abs.to_bits();
    let exp = (bits >> F64_MANT_BITS) as i64 - 1023;
    if exp >= -126 {
        // Normal bf16 range: round the 52-bit mantissa down to 7 bits.
        let mant = bits & ((1u64 << F64_MANT_BITS) - 1);
        let keep = mant >> DROPPED;
        let rem = mant & ((1u64 << DROPPED) - 1);
        let half = 1u64 << (DROPPED - 1);
        let mut kept = keep;
        if rem > half || (rem == half && keep & 1 == 1) {
            kept += 1;
        }
        let (mant_out, exp_out) = if kept == 1 << BF16_MANT_BITS {
            (0u64, exp + 1)
        } else {
            (kept, exp)
        };
        if exp_out >= 128 {
            return sign * BF16_MAX;
        }
        let out_bits = (((exp_out + 1023) as u64) << F64_MANT_BITS) | (mant_out << DROPPED);
        sign * f64::from_bits(out_bits)
    } else {
        // Subnormal bf16 range: nearest multiple of 2^-133, ties to even.
        // Scaling by a power of two is exact, so round_ties_even on the
        // quotient is the true RNE result.
        let n = (abs / BF16_MIN_SUBNORMAL).round_ties_even();
        sign * n * BF16_MIN_SUBNORMAL
    }
}

/// Round every entry; saturation events are counted into the log.
pub fn round_bf16_matrix(m: &DenseMatrix) -> DenseMatrix {
    let mut out = m.clone();
    round_bf16_in_place(&mut out);
    out
}

pub(crate) fn round_bf16_in_place(m: &mut DenseMatrix) {
    let mut saturated = 0usize;
    for x in m.data_mut() {
        let r = round_bf16(*x);
        if x.abs() > BF16_MAX {
            saturated += 1;
        }
        *x = r;
    }
    if saturated > 0 {
        log::warn!("bf16 rounding saturated {saturated} entries to +/-BF16_MAX");
    }
}
