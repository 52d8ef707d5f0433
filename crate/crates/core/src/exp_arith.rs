//! Sign/exponent arithmetic for exponential dithering.
//!
//! Values are carried as `(sign, e)` pairs meaning `sign * 2^-e`, with `e = 0`
//! reserved for exact zero. Inputs are pre-scaled by a power of two at least
//! `2n` so that no partial sum of an aggregation reaches magnitude 1. The
//! pairwise reduce re-rounds each sum to a neighbouring power of two with an
//! integer-only, unbiased rule driven by one geometric draw `k` per element.

use crate::error::{Error, Result};
use crate::quantizer::LevelKind;
use crate::rng::CounterRng;
use crate::wire::{get_uint, put_uint, Width};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ExpToken {
    pub sign: i8,
    pub exp: u32,
}

impl ExpToken {
    pub const ZERO: ExpToken = ExpToken { sign: 1, exp: 0 };

    pub fn new(sign: i8, exp: u32) -> Result<Self> {
        if sign != 1 && sign != -1 {
            return Err(Error::invalid_arg(format!("token sign {sign} is not +-1")));
        }
        Ok(Self { sign, exp })
    }

    pub fn is_zero(self) -> bool {
        self.exp == 0
    }

    pub fn value(self) -> f64 {
        if self.exp == 0 {
            0.0
        } else {
            f64::from(self.sign) * (-f64::from(self.exp)).exp2()
        }
    }
}

pub(crate) fn ceil_log2(n: usize) -> u32 {
    n.next_power_of_two().trailing_zeros()
}

/// The power of two used for pre-scaling: `2n` rounded up to a power of two.
pub fn scale_factor(n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid_arg("worker count must be at least 1"));
    }
    Ok(f64::from(ceil_log2(n) + 1).exp2())
}

pub fn prescale(x: &[f64], n: usize) -> Result<Vec<f64>> {
    let f = scale_factor(n)?;
    Ok(x.iter().map(|v| v / f).collect())
}

pub fn postscale(x: &[f64], n: usize) -> Result<Vec<f64>> {
    let f = scale_factor(n)?;
    Ok(x.iter().map(|v| v * f).collect())
}

/// Token for a locally quantized element at level `level_idx` of an
/// exponential grid with `s` levels, already pre-scaled for `n` workers.
#[inline]
pub fn leaf_token(sign: i8, level_idx: u32, s: u32, n: usize) -> ExpToken {
    if level_idx >= s {
        ExpToken { sign, exp: 0 }
    } else {
        ExpToken {
            sign,
            exp: level_idx + 1 + ceil_log2(n),
        }
    }
}

/// `k = -floor(log2(max(u, 2^-m)))`, so `k` is in `1..=m` and
/// `P(k > b) = 2^-b` for `b < m`.
#[inline]
pub fn sample_k(u01: f64, m: u32) -> u32 {
    debug_assert!((1..=1022).contains(&m), "m = {m} out of range");
    debug_assert!((0.0..1.0).contains(&u01), "u01 = {u01} out of range");
    let floor = (-f64::from(m)).exp2();
    let p = if u01 < floor { floor } else { u01 };
    // Normal doubles only: floor(log2 p) is the unbiased binary exponent.
    let biased = ((p.to_bits() >> 52) & 0x7ff) as u32;
    1023 - biased
}

/// Unbiased stochastic rounding to one of the two powers of two bracketing `|x|`.
pub fn cnat_round(x: f64, u01: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let a = x.abs();
    let lo = if a >= f64::MIN_POSITIVE {
        f64::from_bits(a.to_bits() & 0xfff0_0000_0000_0000)
    } else {
        a.log2().floor().exp2()
    };
    if a == lo {
        return x;
    }
    let p_up = (a - lo) / lo;
    let out = if u01 < p_up { 2.0 * lo } else { lo };
    out.copysign(x)
}

/// One pairwise reduction of two tokens for a given draw `k`.
///
/// Errors if the rounded sum would reach magnitude 1, which pre-scaling rules out.
#[inline]
pub fn reduce_pair(t1: ExpToken, t2: ExpToken, k: u32) -> Result<ExpToken> {
    let (e1, e2) = (i64::from(t1.exp), i64::from(t2.exp));
    let (s1, s2) = (i64::from(t1.sign), i64::from(t2.sign));
    let e1_nz = i64::from(e1 > 0);
    let e2_nz = i64::from(e2 > 0);
    let e2_zero = 1 - e2_nz;
    let sign12 = s1 * s2 * e1_nz * e2_nz;
    let diff = (e1 - e2).abs() - (1 - sign12) / 2;
    let smaller = (i64::from(e1 <= e2) + e2_zero) * e1_nz;
    let nonz = 1 - i64::from(e1 == e2 && sign12 == -1);
    let sign = s1 * smaller + s2 * (1 - smaller);
    let exp = (e1 * smaller + e2 * (1 - smaller) - sign12 * i64::from(i64::from(k) > diff)) * nonz;
    if exp <= 0 && nonz == 1 && (e1_nz | e2_nz) == 1 {
        return Err(Error::OverflowDetected(
            "reduced magnitude reached 1; inputs were not pre-scaled".into(),
        ));
    }
    Ok(ExpToken {
        sign: sign as i8,
        exp: exp as u32,
    })
}

/// The finite law of `k` for a given `m`: `(k, log2(1 / P(k)))`.
pub fn k_distribution(m: u32) -> Vec<(u32, u32)> {
    (1..=m).map(|k| (k, if k < m { k } else { m - 1 })).collect()
}

/// Wire integers can hold `s + 1 + log2(n)` (exponential) or `n (s + 1)`
/// (standard) plus a sign bit.
pub fn check_width(s: u32, n: usize, width_bits: u32, kind: LevelKind) -> bool {
    if s == 0 || n == 0 || width_bits == 0 || width_bits > 63 {
        return false;
    }
    let cap = 1u128 << (width_bits - 1);
    match kind {
        LevelKind::Standard => (n as u128) * (u128::from(s) + 1) <= cap,
        LevelKind::Exponential => u128::from(s) + 1 + u128::from(ceil_log2(n)) <= cap,
        LevelKind::Custom => false,
    }
}

/// Parameters of an exponential-dithering aggregation over `n` workers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReduceContext {
    /// Support bound of `k`; at least the largest exponent gap that can occur.
    pub m: u32,
    pub n: usize,
    pub width: Width,
}

impl ReduceContext {
    pub fn new(s: u32, n: usize, width: Width) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid_arg("worker count must be at least 1"));
        }
        if !check_width(s, n, width.bits(), LevelKind::Exponential) {
            return Err(Error::RefusedConfiguration(format!(
                "exponential dithering with s={s}, n={n} can overflow {}-bit integers",
                width.bits()
            )));
        }
        // Leaf exponents span 1 + log2 n ..= s + log2 n and partial sums only
        // move towards 1, so no gap reaches s + log2 n.
        Ok(Self {
            m: s + 1 + ceil_log2(n),
            n,
            width,
        })
    }

    pub fn max_exp(&self) -> u32 {
        (1u32 << (self.width.bits() - 1)) - 1
    }

    pub fn reduce_pair(&self, t1: ExpToken, t2: ExpToken, k: u32) -> Result<ExpToken> {
        let out = reduce_pair(t1, t2, k)?;
        if out.exp > self.max_exp() {
            return Err(Error::OverflowDetected(format!(
                "exponent {} exceeds {}-bit lane",
                out.exp,
                self.width.bits()
            )));
        }
        Ok(out)
    }

    /// `acc[j] <- reduce(acc[j], other[j])` with `k` drawn from `rng` at
    /// index `offset + j`.
    pub fn reduce_into(
        &self,
        acc: &mut [ExpToken],
        other: &[ExpToken],
        rng: CounterRng,
        offset: u64,
    ) -> Result<()> {
        if acc.len() != other.len() {
            return Err(Error::invalid_arg(format!(
                "length mismatch {} vs {}",
                acc.len(),
                other.len()
            )));
        }
        for (j, (a, &b)) in acc.iter_mut().zip(other).enumerate() {
            let k = sample_k(rng.u01(offset + j as u64), self.m);
            *a = self.reduce_pair(*a, b, k)?;
        }
        Ok(())
    }
}

pub fn reduce_vec(
    ctx: &ReduceContext,
    v1: &[ExpToken],
    v2: &[ExpToken],
    rng: CounterRng,
) -> Result<Vec<ExpToken>> {
    let mut out = v1.to_vec();
    ctx.reduce_into(&mut out, v2, rng, 0)?;
    Ok(out)
}

/// One integer per token: sign in the top bit, exponent in the low `A - 1` bits.
pub fn encode_tokens(tokens: &[ExpToken], w: Width, out: &mut Vec<u8>) -> Result<()> {
    let max = (1u64 << (w.bits() - 1)) - 1;
    out.reserve(tokens.len() * w.bytes());
    for t in tokens {
        if u64::from(t.exp) > max {
            return Err(Error::OverflowDetected(format!(
                "exponent {} does not fit {} bits",
                t.exp,
                w.bits() - 1
            )));
        }
        let sign_bit = u64::from(t.sign < 0) << (w.bits() - 1);
        put_uint(out, sign_bit | u64::from(t.exp), w);
    }
    Ok(())
}

pub fn decode_tokens(bytes: &[u8], w: Width) -> Result<Vec<ExpToken>> {
    if bytes.len() % w.bytes() != 0 {
        return Err(Error::corrupt("token buffer is not a whole number of lanes"));
    }
    let top = w.bits() - 1;
    Ok(bytes
        .chunks_exact(w.bytes())
        .map(|c| {
            let raw = get_uint(c, w);
            ExpToken {
                sign: if raw >> top & 1 == 1 { -1 } else { 1 },
                exp: (raw & ((1u64 << top) - 1)) as u32,
            }
        })
        .collect())
}
