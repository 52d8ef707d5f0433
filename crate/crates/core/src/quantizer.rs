//! Level grids, global norms, stochastic rounding and quantized shards.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::CounterRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LevelKind {
    /// Uniform levels `(s - i) / s`.
    Standard,
    /// Levels `2^-i` for `i < s`, plus zero.
    Exponential,
    /// Any strictly decreasing grid from 1 down to 0.
    Custom,
}

/// A quantization grid `1 = l_0 > l_1 > ... > l_s = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelScheme {
    kind: LevelKind,
    levels: Vec<f64>,
}

impl LevelScheme {
    pub fn build(kind: LevelKind, s: u32) -> Result<Self> {
        if s == 0 {
            return Err(Error::invalid_arg("number of levels s must be at least 1"));
        }
        let levels = match kind {
            LevelKind::Standard => (0..=s).map(|i| f64::from(s - i) / f64::from(s)).collect(),
            LevelKind::Exponential => {
                if s > 1074 {
                    return Err(Error::invalid_arg(format!(
                        "exponential grid with s={s} underflows binary64"
                    )));
                }
                let mut v: Vec<f64> = (0..s).map(|i| (-(i as f64)).exp2()).collect();
                v.push(0.0);
                v
            }
            LevelKind::Custom => {
                return Err(Error::invalid_arg(
                    "custom grids are built with LevelScheme::custom",
                ))
            }
        };
        Ok(Self { kind, levels })
    }

    pub fn standard(s: u32) -> Result<Self> {
        Self::build(LevelKind::Standard, s)
    }

    pub fn exponential(s: u32) -> Result<Self> {
        Self::build(LevelKind::Exponential, s)
    }

    /// A user-supplied grid. Only unbiasedness is guaranteed for these.
    pub fn custom(levels: Vec<f64>) -> Result<Self> {
        if levels.len() < 2 {
            return Err(Error::invalid_arg("a grid needs at least the levels 1 and 0"));
        }
        if levels[0] != 1.0 || *levels.last().unwrap() != 0.0 {
            return Err(Error::invalid_arg("grid must start at 1 and end at 0"));
        }
        if levels.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(Error::invalid_arg("grid must be strictly decreasing"));
        }
        Ok(Self {
            kind: LevelKind::Custom,
            levels,
        })
    }

    pub fn kind(&self) -> LevelKind {
        self.kind
    }

    /// Index of the zero level.
    pub fn s(&self) -> u32 {
        (self.levels.len() - 1) as u32
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    #[inline]
    pub fn level(&self, idx: u32) -> f64 {
        self.levels[idx as usize]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NormOrder {
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "inf")]
    Inf,
}

/// Orders of the mixed norm `||xx||_{q,p} = (sum_i ||x_i||_q^p)^(1/p)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NormSpec {
    /// Order of the per-worker norm.
    pub q: NormOrder,
    /// Order used to combine the per-worker norms.
    pub p: NormOrder,
}

impl NormSpec {
    pub const L2: NormSpec = NormSpec {
        q: NormOrder::Two,
        p: NormOrder::Two,
    };
    pub const LINF: NormSpec = NormSpec {
        q: NormOrder::Inf,
        p: NormOrder::Inf,
    };
}

impl Default for NormSpec {
    fn default() -> Self {
        NormSpec::LINF
    }
}

/// This worker's contribution to the global norm: `||x||_q^p` for `p = 2`,
/// `||x||_q` for `p = inf` (to be max-combined).
pub fn local_norm_stat(x: &[f64], spec: NormSpec) -> Result<f64> {
    if let Some(j) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid_input(format!("non-finite entry at index {j}")));
    }
    let stat = match (spec.q, spec.p) {
        (NormOrder::Two, NormOrder::Two) => x.iter().map(|v| v * v).sum(),
        (NormOrder::Two, NormOrder::Inf) => x.iter().map(|v| v * v).sum::<f64>().sqrt(),
        (NormOrder::Inf, NormOrder::Two) => {
            let m = max_abs(x);
            m * m
        }
        (NormOrder::Inf, NormOrder::Inf) => max_abs(x),
    };
    if !stat.is_finite() {
        return Err(Error::invalid_input("norm statistic overflowed"));
    }
    Ok(stat)
}

fn max_abs(x: &[f64]) -> f64 {
    x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Combine per-worker statistics into `||xx||_{q,p}`.
pub fn combine_norm_stats(stats: &[f64], spec: NormSpec) -> Result<f64> {
    if let Some(v) = stats.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::invalid_input(format!("invalid norm statistic {v}")));
    }
    let norm = match spec.p {
        NormOrder::Two => stats.iter().sum::<f64>().sqrt(),
        NormOrder::Inf => stats.iter().fold(0.0f64, |m, v| m.max(*v)),
    };
    if !norm.is_finite() {
        return Err(Error::invalid_input("global norm overflowed"));
    }
    Ok(norm)
}

/// `||xx||_{q,p}` of the concatenation of `shards`, computed in one process.
pub fn global_norm(shards: &[Vec<f64>], spec: NormSpec) -> Result<f64> {
    let stats = shards
        .iter()
        .map(|x| local_norm_stat(x, spec))
        .collect::<Result<Vec<_>>>()?;
    combine_norm_stats(&stats, spec)
}

/// Unbiased stochastic rounding of `y` in `[0, 1]` onto the grid; returns the
/// level index.
pub fn random_round(y: f64, scheme: &LevelScheme, u01: f64) -> Result<u32> {
    if !(0.0..=1.0).contains(&y) {
        return Err(Error::invalid_input(format!("value {y} outside [0, 1]")));
    }
    Ok(round_unchecked(y, scheme.levels(), u01))
}

/// Bracket `l_{u+1} <= y <= l_u`, round up to `l_u` with probability
/// `(y - l_{u+1}) / (l_u - l_{u+1})`.
#[inline]
fn round_unchecked(y: f64, levels: &[f64], u01: f64) -> u32 {
    let lower = levels.partition_point(|&l| l > y);
    if lower == 0 {
        return 0;
    }
    let upper = lower - 1;
    let (hi, lo) = (levels[upper], levels[lower]);
    if u01 < (y - lo) / (hi - lo) {
        upper as u32
    } else {
        lower as u32
    }
}

/// One worker's quantized vector.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedShard {
    /// `+1` or `-1` per element; zero has sign `+1`.
    pub signs: Vec<i8>,
    pub level_idx: Vec<u32>,
    /// The global norm used for normalization.
    pub norm: f64,
}

impl QuantizedShard {
    pub fn zeros(d: usize, s: u32) -> Self {
        Self {
            signs: vec![1; d],
            level_idx: vec![s; d],
            norm: 0.0,
        }
    }

    pub fn d(&self) -> usize {
        self.level_idx.len()
    }

    /// Number of elements not at the zero level.
    pub fn nnz(&self, s: u32) -> usize {
        self.level_idx.iter().filter(|&&i| i != s).count()
    }
}

/// Quantize `x` against the (global) `norm`. Element `j` consumes draw `j`
/// of `rng`.
pub fn quantize_shard(
    x: &[f64],
    norm: f64,
    scheme: &LevelScheme,
    rng: CounterRng,
) -> Result<QuantizedShard> {
    let s = scheme.s();
    if !(norm.is_finite() && norm >= 0.0) {
        return Err(Error::invalid_input(format!("invalid norm {norm}")));
    }
    if norm == 0.0 {
        if x.iter().any(|&v| v != 0.0) {
            return Err(Error::PreconditionViolation(
                "zero norm with a non-zero input".into(),
            ));
        }
        return Ok(QuantizedShard::zeros(x.len(), s));
    }
    let levels = scheme.levels();
    let mut signs = Vec::with_capacity(x.len());
    let mut level_idx = Vec::with_capacity(x.len());
    for (j, &v) in x.iter().enumerate() {
        let a = v.abs();
        if !(a <= norm) {
            return Err(Error::PreconditionViolation(format!(
                "|x[{j}]| = {a} exceeds the norm {norm}"
            )));
        }
        signs.push(if v < 0.0 { -1 } else { 1 });
        level_idx.push(round_unchecked(a / norm, levels, rng.u01(j as u64)));
    }
    Ok(QuantizedShard {
        signs,
        level_idx,
        norm,
    })
}

pub fn decode_shard(shard: &QuantizedShard, scheme: &LevelScheme) -> Result<Vec<f64>> {
    let s = scheme.s();
    if shard.signs.len() != shard.level_idx.len() {
        return Err(Error::corrupt("sign and level arrays differ in length"));
    }
    shard
        .signs
        .iter()
        .zip(&shard.level_idx)
        .map(|(&sg, &idx)| {
            if idx > s {
                Err(Error::corrupt(format!("level index {idx} > s = {s}")))
            } else {
                Ok(shard.norm * f64::from(sg) * scheme.level(idx))
            }
        })
        .collect()
}

/// Non-zero coefficients of a shard. Zero levels are never stored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparsePayload {
    pub d: u32,
    pub indices: Vec<u32>,
    pub signs: Vec<i8>,
    pub level_idx: Vec<u32>,
}

impl SparsePayload {
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn validate(&self, s: u32) -> Result<()> {
        let nnz = self.indices.len();
        if self.signs.len() != nnz || self.level_idx.len() != nnz {
            return Err(Error::corrupt("sparse arrays differ in length"));
        }
        if self.indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::corrupt("sparse indices not strictly increasing"));
        }
        if let Some(&i) = self.indices.last() {
            if i >= self.d {
                return Err(Error::corrupt(format!("index {i} out of range d={}", self.d)));
            }
        }
        if let Some(&l) = self.level_idx.iter().find(|&&l| l >= s) {
            return Err(Error::corrupt(format!("stored level {l} is not below s={s}")));
        }
        if self.signs.iter().any(|&sg| sg != 1 && sg != -1) {
            return Err(Error::corrupt("sign must be +1 or -1"));
        }
        Ok(())
    }
}

pub fn to_sparse(shard: &QuantizedShard, scheme: &LevelScheme) -> SparsePayload {
    let s = scheme.s();
    let mut out = SparsePayload {
        d: shard.d() as u32,
        indices: Vec::new(),
        signs: Vec::new(),
        level_idx: Vec::new(),
    };
    for (j, (&sg, &idx)) in shard.signs.iter().zip(&shard.level_idx).enumerate() {
        if idx != s {
            out.indices.push(j as u32);
            out.signs.push(sg);
            out.level_idx.push(idx);
        }
    }
    out
}

pub fn from_sparse(payload: &SparsePayload, scheme: &LevelScheme, norm: f64) -> Result<Vec<f64>> {
    payload.validate(scheme.s())?;
    let mut out = vec![0.0; payload.d as usize];
    accumulate_sparse(payload, scheme, norm, &mut out);
    Ok(out)
}

/// `acc += decode(payload)`; `payload` must already be validated.
pub(crate) fn accumulate_sparse(payload: &SparsePayload, scheme: &LevelScheme, norm: f64, acc: &mut [f64]) {
    for ((&j, &sg), &idx) in payload.indices.iter().zip(&payload.signs).zip(&payload.level_idx) {
        acc[j as usize] += norm * f64::from(sg) * scheme.level(idx);
    }
}
