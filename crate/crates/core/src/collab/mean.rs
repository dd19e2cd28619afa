//! Correctly rounded arithmetic mean.
//!
//! Finite values are accumulated exactly as big integers on a common binary
//! scale, so the result is the `f64` nearest to the true mean (ties to even)
//! regardless of input order or magnitude spread.

use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::{ToPrimitive, Zero};

/// `v = (-1)^neg * mantissa * 2^exp` exactly.
fn decompose(v: f64) -> (bool, u64, i32) {
    let bits = v.to_bits();
    let neg = bits >> 63 == 1;
    let exp_bits = ((bits >> 52) & 0x7ff) as i32;
    let frac = bits & ((1 << 52) - 1);
    if exp_bits == 0 {
        (neg, frac, -1074)
    } else {
        (neg, frac | (1 << 52), exp_bits - 1075)
    }
}

fn pow2(e: i32) -> f64 {
    if e >= -1022 {
        f64::from_bits(((e + 1023) as u64) << 52)
    } else {
        f64::from_bits(1 << (e + 1074))
    }
}

/// Nearest `f64` to `num * 2^exp / den`, ties to even.
fn round_quotient(num: &BigUint, den: u64, exp: i32) -> f64 {
    if num.is_zero() {
        return 0.0;
    }
    let den_bits = 64 - den.leading_zeros() as i64;
    // at least 55 quotient bits: 53 kept, one guard, one more so rounding
    // never needs the bits of the divisor
    let shift = (55 + den_bits - num.bits() as i64).max(0) as u32;
    let (q, r) = (num << shift).div_rem(&BigUint::from(den));
    let exp = exp - shift as i32;
    let top = q.bits() as i32 - 1 + exp;
    let lsb = (top - 52).max(-1074);
    let drop = (lsb - exp) as u32;
    let mut mant = (&q >> drop).to_u64().expect("at most 53 bits");
    let rem = &q - (BigUint::from(mant) << drop);
    let half = BigUint::from(1u8) << (drop - 1);
    let round_up = match rem.cmp(&half) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Equal => !r.is_zero() || mant & 1 == 1,
        std::cmp::Ordering::Less => false,
    };
    if round_up {
        mant += 1;
    }
    mant as f64 * pow2(lsb)
}

/// The `f64` nearest to the exact mean of `values`. Equal inputs return that
/// input bit for bit; a non-finite input falls back to the plain mean.
pub fn exact_mean(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "mean of no values");
    let first = values[0];
    if values.iter().all(|v| v.to_bits() == first.to_bits()) {
        return first;
    }
    if values.iter().any(|v| !v.is_finite()) {
        return values.iter().sum::<f64>() / values.len() as f64;
    }
    let parts: Vec<(bool, u64, i32)> = values.iter().map(|&v| decompose(v)).collect();
    let base = parts.iter().map(|p| p.2).min().expect("non-empty");
    let (mut pos, mut neg) = (BigUint::zero(), BigUint::zero());
    for &(is_neg, mant, exp) in &parts {
        let term = BigUint::from(mant) << (exp - base) as u32;
        if is_neg {
            neg += term;
        } else {
            pos += term;
        }
    }
    let n = values.len() as u64;
    if pos >= neg {
        round_quotient(&(pos - neg), n, base)
    } else {
        -round_quotient(&(neg - pos), n, base)
    }
}
