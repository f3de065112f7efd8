//! Scalar integer primitives: dyadic fitting, floor-log2, integer square
//! root, fixed-point division and the shift-only exponential.
//!
//! Everything here is integer-in integer-out; these routines back every
//! operator on the integer path.

use crate::error::{Error, Result};
use crate::quant::DyadicScale;

/// Round `num / den` half away from zero, `den > 0`.
pub(crate) fn round_div_i128(num: i128, den: i128) -> i128 {
    debug_assert!(den > 0);
    if num >= 0 {
        (2 * num + den) / (2 * den)
    } else {
        -((-2 * num + den) / (2 * den))
    }
}

/// Round `num / den` half up (equals half away from zero for non-negatives).
pub(crate) fn round_div_u128(num: u128, den: u128) -> u128 {
    debug_assert!(den > 0);
    (2 * num + den) / (2 * den)
}

/// ⌊log2 n⌋ — the index of the most significant set bit.
pub fn floor_log2(n: u64) -> Result<u32> {
    if n == 0 {
        return Err(Error::Log2OfZero);
    }
    Ok(n.ilog2())
}

pub(crate) fn floor_log2_u128(n: u128) -> Result<u32> {
    if n == 0 {
        return Err(Error::Log2OfZero);
    }
    Ok(n.ilog2())
}

/// Fit `numerator / denominator` to the closest 8-bit dyadic `m / 2^k`.
///
/// Picks the shift first by pinning the mantissa upper bound at 256:
/// `k = ⌊log2(256·den/num)⌋`, then `m = ⌊num·2^k/den⌉`; a mantissa that
/// rounds to 256 drops the shift by one. The result lands in
/// m ∈ [128, 255], giving relative error ≤ 2^-8 for in-range targets.
pub fn fit_dyadic(numerator: u64, denominator: u64) -> Result<DyadicScale> {
    if denominator == 0 {
        return Err(Error::DivisionByZero("fit_dyadic"));
    }
    if numerator == 0 {
        return Ok(DyadicScale { m: 0, k: 0 });
    }
    if numerator > denominator.saturating_mul(255) {
        return Err(Error::ScaleOutOfRange {
            num: numerator,
            den: denominator,
        });
    }
    let num = numerator as u128;
    let den = denominator as u128;
    // target ≤ 255 ⇒ 256·den/num > 1, so k ≥ 0.
    let mut k = floor_log2_u128(256 * den / num)?;
    if k > 255 {
        // Target below the 8-bit dyadic range; saturate the shift. The
        // mantissa may round to zero (degenerate scale).
        k = 255;
    }
    let mut m = round_div_u128(num << k, den);
    if m > 255 {
        k -= 1;
        m = round_div_u128(num << k, den);
    }
    Ok(DyadicScale {
        m: m as u32,
        k,
    })
}

/// ⌊√n⌋ by the bit-wise check method, 32 iterations for 64-bit inputs.
pub fn i_sqrt(input: u64) -> u64 {
    let mut x = input;
    let mut n: u64 = 0;
    let mut b: u64 = 0x8000_0000;
    let mut v: u32 = 31;
    while b != 0 {
        let temp = ((n << 1) + b) << v;
        v = v.wrapping_sub(1);
        if x >= temp {
            n += b;
            x -= temp;
        }
        b >>= 1;
    }
    n
}

/// ⌊√n⌋ for 128-bit inputs: normalize into 64-bit range, then correct.
pub(crate) fn i_sqrt_wide(input: u128) -> u128 {
    if input <= u64::MAX as u128 {
        return i_sqrt(input as u64) as u128;
    }
    let bits = 128 - input.leading_zeros();
    let shift = (bits - 63).div_ceil(2) * 2;
    let mut r = (i_sqrt((input >> shift) as u64) as u128) << (shift / 2);
    // The scaled estimate is below the true root by at most a few ulps.
    while (r + 1).checked_mul(r + 1).is_some_and(|s| s <= input) {
        r += 1;
    }
    while r * r > input {
        r -= 1;
    }
    r
}

/// Fixed-point ratio ⌊a · 2^(p-1) / b⌉ with implicit output scale 1/2^(p-1).
///
/// Ratios are ≤ 1 at every call site, so `a ≤ b` is enforced.
pub fn int_div(a: u64, b: u64, p: u32) -> Result<u64> {
    if b == 0 {
        return Err(Error::DivisionByZero("int_div"));
    }
    if a > b {
        return Err(Error::RatioOutOfRange {
            ctx: "int_div",
            num: a,
            den: b,
        });
    }
    if !(2..=16).contains(&p) {
        return Err(Error::InvalidPrecision(p));
    }
    Ok(round_div_u128((a as u128) << (p - 1), b as u128) as u64)
}

/// Output of [`di_exp`]: non-negative integers proportional to
/// `e^(x · scale)` with one shared proportionality constant `unit` per
/// call (the value at x = 0). Ratios of entries, or of an entry against
/// `unit`, cancel the constant.
#[derive(Debug, Clone)]
pub struct DiExpOutput {
    pub values: Vec<u64>,
    pub unit: u64,
}

/// Resolution target for the exponential's integer step: the input is
/// re-expressed as `(x << h) / 2^(k+h)` (value-identical) so |t| carries
/// about this many bits. Without the normalization, coarse scales like
/// 1/2 collapse to |t| = 1 and the output carries no information.
const EXP_STEP_BITS: u32 = 14;

/// Integer step used by the shift-only exponential for a given scale:
/// `t = ⌊-2^(k+h) / m_f⌉` where `m_f = m + (m≫1) - (m≫4)` approximates
/// `m·log2(e)` with shifts. Returns the negative step and the headroom
/// shift `h`.
fn exp_step(scale: DyadicScale) -> Result<(i128, u32)> {
    if scale.m == 0 {
        return Err(Error::ZeroScale("di_exp"));
    }
    if scale.k > 62 {
        return Err(Error::ShiftOverflow {
            ctx: "di_exp",
            shift: scale.k,
            limit: 62,
        });
    }
    let m = scale.m as i128;
    let m_f = m + (m >> 1) - (m >> 4);
    let bits = 128 - m_f.leading_zeros();
    let h = (EXP_STEP_BITS + bits).saturating_sub(scale.k).min(32);
    let t = -round_div_i128(1i128 << (scale.k + h), m_f);
    if -t > i32::MAX as i128 {
        return Err(Error::ExpStepOverflow { t: t as i64 });
    }
    Ok((t, h))
}

fn di_exp_one(x: i64, t: i128, h: u32) -> u64 {
    debug_assert!(x <= 0 && t < 0);
    let xh = (x as i128) << h;
    // xh ≤ 0, t < 0 ⇒ the quotient is non-negative, so truncation is floor.
    let q = xh / t;
    if q >= 63 {
        return 0;
    }
    let r = xh - q * t; // r ∈ (t, 0]
    let unshifted = (r >> 1) - t; // arithmetic shift: floor(r/2) + |t|
    let q = q as u32;
    if q == 0 {
        unshifted as u64
    } else {
        // Round-to-nearest shift: a plain floor shift zeroes sub-unit
        // exponentials and wipes out softmax tail probabilities.
        ((unshifted + (1 << (q - 1))) >> q) as u64
    }
}

/// Shift-only exponential over non-positive integers.
///
/// Output values are proportional to `e^(x · m/2^k)` with shared constant
/// `|t|`; `x = 0` maps to `|t|` itself.
pub fn di_exp(xs: &[i64], scale: DyadicScale) -> Result<DiExpOutput> {
    let (t, h) = exp_step(scale)?;
    let mut values = Vec::with_capacity(xs.len());
    for &x in xs {
        if x > 0 {
            return Err(Error::RatioOutOfRange {
                ctx: "di_exp input must be non-positive",
                num: x as u64,
                den: 0,
            });
        }
        values.push(di_exp_one(x, t, h));
    }
    Ok(DiExpOutput {
        values,
        unit: (-t) as u64,
    })
}
