//! Statistical and exhaustive checks of the estimator's guarantees.

use rayon::prelude::*;
use serde::Serialize;

use crate::algorithm::{exact_mean, gqsgd_mean, monte_carlo, GqsgdConfig};
use crate::error::{Error, Result};
use crate::exp_arith::{k_distribution, reduce_pair, sample_k, ExpToken};
use crate::quantizer::{
    combine_norm_stats, decode_shard, local_norm_stat, quantize_shard, LevelKind, LevelScheme,
    NormSpec,
};
use crate::rng::{domain, CounterRng};
use crate::trainer::theta_hat;

/// Standard errors allowed between an estimate and its bound.
pub const Z: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundCheck {
    pub name: String,
    pub empirical: f64,
    pub bound: f64,
    pub trials: usize,
    /// Monte-Carlo confidence radius; 0 for exact checks.
    pub radius: f64,
    pub pass: bool,
}

impl BoundCheck {
    /// Passes iff `empirical <= bound + radius`.
    pub fn upper(name: impl Into<String>, empirical: f64, bound: f64, trials: usize, radius: f64) -> Self {
        Self {
            name: name.into(),
            empirical,
            bound,
            trials,
            radius,
            pass: empirical <= bound + radius,
        }
    }

    pub fn csv_header() -> &'static str {
        "name,empirical,bound,radius,trials,pass"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{},{}",
            self.name, self.empirical, self.bound, self.radius, self.trials, self.pass
        )
    }
}

/// Trials per parallel chunk; fixed so that sums are reproducible.
const CHUNK: u64 = 512;

/// Per-coordinate sums of `f(t)` and of its squares over `trials` trials.
fn vector_moments<F>(trials: usize, d: usize, f: F) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: Fn(u64) -> Result<Vec<f64>> + Sync + Send,
{
    let t = trials as u64;
    let chunks: Vec<(Vec<f64>, Vec<f64>)> = (0..t.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let (mut s1, mut s2) = (vec![0.0; d], vec![0.0; d]);
            for i in c * CHUNK..((c + 1) * CHUNK).min(t) {
                let v = f(i)?;
                for j in 0..d {
                    s1[j] += v[j];
                    s2[j] += v[j] * v[j];
                }
            }
            Ok((s1, s2))
        })
        .collect::<Result<_>>()?;
    let (mut s1, mut s2) = (vec![0.0; d], vec![0.0; d]);
    for (a, b) in chunks {
        for j in 0..d {
            s1[j] += a[j];
            s2[j] += b[j];
        }
    }
    Ok((s1, s2))
}

fn trial_root(seed: u64) -> CounterRng {
    CounterRng::new(seed).fork(domain::TRIAL)
}

/// Largest per-coordinate z-score of the estimator's mean against the true
/// mean; passes iff every coordinate is within [`Z`] standard errors.
/// Coordinates with zero sample variance must match exactly.
pub fn check_unbiased(shards: &[Vec<f64>], cfg: &GqsgdConfig, trials: usize, seed: u64) -> Result<BoundCheck> {
    if trials < 2 {
        return Err(Error::invalid_arg("at least two trials are needed"));
    }
    let xbar = exact_mean(shards)?;
    let d = xbar.len();
    let root = trial_root(seed);
    // deviations from the truth keep the sums well conditioned
    let (s1, s2) = vector_moments(trials, d, |t| {
        let out = gqsgd_mean(shards, cfg, root.fork(t), 0)?;
        Ok(out.mean().iter().zip(&xbar).map(|(a, b)| a - b).collect())
    })?;
    let tf = trials as f64;
    let mut worst: f64 = 0.0;
    for j in 0..d {
        let mean = s1[j] / tf;
        let var = ((s2[j] - s1[j] * mean) / (tf - 1.0)).max(0.0);
        let se = (var / tf).sqrt();
        let z = if se > 0.0 {
            mean.abs() / se
        } else if mean == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        worst = worst.max(z);
    }
    Ok(BoundCheck::upper("unbiased (max z-score)", worst, Z, trials, 0.0))
}

fn sq_norm_all(shards: &[Vec<f64>]) -> f64 {
    shards.iter().flatten().map(|v| v * v).sum()
}

/// `n E||G - mean||^2 / ||xx||^2` against the single-shot variance parameter.
pub fn check_variance(shards: &[Vec<f64>], cfg: &GqsgdConfig, trials: usize, seed: u64) -> Result<BoundCheck> {
    let n = shards.len();
    let d = shards.first().map_or(0, |x| x.len());
    let theta = theta_hat(&cfg.scheme, n, d)
        .ok_or_else(|| Error::invalid_arg("no variance bound for custom grids"))?;
    let total = sq_norm_all(shards);
    if total == 0.0 {
        return Ok(BoundCheck::upper("variance", 0.0, theta, trials, 0.0));
    }
    let xbar = exact_mean(shards)?;
    let root = trial_root(seed);
    let (mean, se) = monte_carlo(trials, |t| {
        let out = gqsgd_mean(shards, cfg, root.fork(t), 0)?;
        Ok(out.mean().iter().zip(&xbar).map(|(a, b)| (a - b).powi(2)).sum())
    })?;
    let scale = n as f64 / total;
    Ok(BoundCheck::upper("variance", mean * scale, theta, trials, Z * se * scale))
}

/// Expected total non-zero count of the quantized shards under the l2 global
/// norm, against `s^2 + sqrt(nd)` (standard) or `2^(2s-2) + sqrt(nd)` (exponential).
pub fn check_sparsity(shards: &[Vec<f64>], scheme: &LevelScheme, trials: usize, seed: u64) -> Result<BoundCheck> {
    let n = shards.len();
    let d = shards.first().map_or(0, |x| x.len());
    let s = f64::from(scheme.s());
    let root_nd = ((n * d) as f64).sqrt();
    let bound = match scheme.kind() {
        LevelKind::Standard => s * s + root_nd,
        LevelKind::Exponential => (2.0 * s - 2.0).exp2() + root_nd,
        LevelKind::Custom => return Err(Error::invalid_arg("no sparsity bound for custom grids")),
    };
    let spec = NormSpec::L2;
    let stats = shards.iter().map(|x| local_norm_stat(x, spec)).collect::<Result<Vec<_>>>()?;
    let norm = combine_norm_stats(&stats, spec)?;
    let root = trial_root(seed);
    let (mean, se) = monte_carlo(trials, |t| {
        let mut nnz = 0;
        for (i, x) in shards.iter().enumerate() {
            let q = quantize_shard(x, norm, scheme, root.fork(t).fork(i as u64))?;
            nnz += q.nnz(scheme.s());
        }
        Ok(nnz as f64)
    })?;
    Ok(BoundCheck::upper("sparsity", mean, bound, trials, Z * se))
}

/// Exact expectation of `reduce_pair` over the law of `k`, for every pair of
/// tokens with exponents in `0..=m` whose sum stays below magnitude 1/2 (the
/// pre-scaled regime), compared to the true sum in integer arithmetic.
/// `empirical` is the number of mismatching pairs.
pub fn check_reduce_exact(m: u32) -> Result<BoundCheck> {
    if !(2..=30).contains(&m) {
        return Err(Error::invalid_arg("m must lie in 2..=30"));
    }
    // values are multiples of 2^-(m+1); probabilities multiples of 2^-(m-1)
    let vshift = m + 1;
    let pshift = m - 1;
    let val = |t: ExpToken| -> i128 {
        if t.exp == 0 {
            0
        } else {
            i128::from(t.sign) << (vshift - t.exp)
        }
    };
    let law = k_distribution(m);
    let total_p: i128 = law.iter().map(|&(_, lg)| 1i128 << (pshift - lg)).sum();
    if total_p != 1i128 << pshift {
        return Ok(BoundCheck::upper("reduce exactness (k law)", 1.0, 0.0, 0, 0.0));
    }
    let tokens: Vec<ExpToken> = std::iter::once(ExpToken::ZERO)
        .chain((1..=m).flat_map(|e| [ExpToken { sign: 1, exp: e }, ExpToken { sign: -1, exp: e }]))
        .collect();
    let mut bad = 0usize;
    let mut pairs = 0usize;
    for &a in &tokens {
        for &b in &tokens {
            let truth = val(a) + val(b);
            if truth.abs() > 1i128 << (vshift - 1) {
                continue;
            }
            pairs += 1;
            let mut expect = 0i128;
            for &(k, lg) in &law {
                let r = reduce_pair(a, b, k)?;
                expect += val(r) << (pshift - lg);
            }
            if expect != truth << pshift {
                bad += 1;
            }
        }
    }
    Ok(BoundCheck::upper(format!("reduce exactness (m={m})"), bad as f64, 0.0, pairs, 0.0))
}

/// `P(k > b)` for `b` in `0..=max_b` from `draws` samples, each within [`Z`]
/// standard errors of `2^-b`. `empirical` is the largest z-score.
pub fn check_k_distribution(m: u32, max_b: u32, draws: usize, seed: u64) -> Result<BoundCheck> {
    if max_b >= m {
        return Err(Error::invalid_arg("b must stay below m"));
    }
    let rng = trial_root(seed).fork(u64::from(m));
    let counts: Vec<u64> = (0..draws as u64)
        .into_par_iter()
        .fold(
            || vec![0u64; max_b as usize + 1],
            |mut c, i| {
                let k = sample_k(rng.u01(i), m);
                for b in 0..=max_b.min(k.saturating_sub(1)) {
                    c[b as usize] += 1;
                }
                c
            },
        )
        .reduce(|| vec![0u64; max_b as usize + 1], |a, b| a.iter().zip(&b).map(|(x, y)| x + y).collect());
    let n = draws as f64;
    let mut worst: f64 = 0.0;
    for (b, &c) in counts.iter().enumerate() {
        let p = (-(b as f64)).exp2();
        let se = (p * (1.0 - p) / n).sqrt();
        let z = if se > 0.0 {
            (c as f64 / n - p).abs() / se
        } else if c as f64 == n * p {
            0.0
        } else {
            f64::INFINITY
        };
        worst = worst.max(z);
    }
    Ok(BoundCheck::upper("k law P(k>b)=2^-b (max z-score)", worst, Z, draws, 0.0))
}

/// Independent per-worker quantizers with local l2 norms, averaged: variance
/// times `n^2 / sum ||x_i||^2` against the one-node parameter
/// `min(d / s^2, sqrt(d) / s)`, i.e. the averaged compressor has `theta = omega / n`.
pub fn check_local_compressors(shards: &[Vec<f64>], s: u32, trials: usize, seed: u64) -> Result<BoundCheck> {
    let n = shards.len();
    let d = shards.first().map_or(0, |x| x.len()) as f64;
    let scheme = LevelScheme::standard(s)?;
    let sf = f64::from(s);
    let omega = (d / (sf * sf)).min(d.sqrt() / sf);
    let xbar = exact_mean(shards)?;
    let total = sq_norm_all(shards);
    if total == 0.0 {
        return Ok(BoundCheck::upper("independent local compressors", 0.0, omega, trials, 0.0));
    }
    let norms = shards
        .iter()
        .map(|x| local_norm_stat(x, NormSpec::L2).map(f64::sqrt))
        .collect::<Result<Vec<_>>>()?;
    let root = trial_root(seed);
    let (mean, se) = monte_carlo(trials, |t| {
        let mut acc = vec![0.0; xbar.len()];
        for (i, x) in shards.iter().enumerate() {
            let q = quantize_shard(x, norms[i], &scheme, root.fork(t).fork(i as u64))?;
            for (a, v) in acc.iter_mut().zip(decode_shard(&q, &scheme)?) {
                *a += v;
            }
        }
        Ok(acc.iter().zip(&xbar).map(|(a, b)| (a / n as f64 - b).powi(2)).sum())
    })?;
    let scale = (n * n) as f64 / total;
    Ok(BoundCheck::upper("independent local compressors", mean * scale, omega, trials, Z * se * scale))
}

/// Aggregation cost of the exponential tree.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TreeInflation {
    /// `E||G_tree||^2 / E||G_exact||^2` against `(9/8)^depth`; the per-step
    /// factor 9/8 bounds the second moment, not the centred variance.
    pub second_moment: BoundCheck,
    /// `E||G_tree - mean||^2 / E||G_exact - mean||^2`, for information.
    pub variance_ratio: f64,
}

/// Compare the dense exponential tree against exact summation of the same
/// quantized leaves (the sparse path).
pub fn check_tree_inflation(
    shards: &[Vec<f64>],
    s: u32,
    bound: f64,
    trials: usize,
    seed: u64,
) -> Result<TreeInflation> {
    let tree = GqsgdConfig::exponential(s)?.with_spec(NormSpec::L2);
    let exact = tree.clone().with_sparse(true);
    let xbar = exact_mean(shards)?;
    let root = trial_root(seed);
    let run = |cfg: &GqsgdConfig, centre: bool| {
        monte_carlo(trials, |t| {
            let out = gqsgd_mean(shards, cfg, root.fork(t), 0)?;
            Ok(out
                .mean()
                .iter()
                .zip(&xbar)
                .map(|(a, b)| if centre { (a - b).powi(2) } else { a * a })
                .sum())
        })
    };
    let (a, sa) = run(&tree, false)?;
    let (b, sb) = run(&exact, false)?;
    let ratio = a / b;
    let radius = Z * ratio * ((sa / a).powi(2) + (sb / b).powi(2)).sqrt();
    let (va, _) = run(&tree, true)?;
    let (vb, _) = run(&exact, true)?;
    Ok(TreeInflation {
        second_moment: BoundCheck::upper("tree second-moment inflation", ratio, bound, trials, radius),
        variance_ratio: va / vb,
    })
}

/// Gaussian shards from a counter stream (Box-Muller).
pub fn gaussian_shards(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let rng = CounterRng::new(seed).fork(domain::DATA);
    (0..n)
        .map(|i| {
            let r = rng.fork(i as u64);
            (0..d)
                .map(|j| {
                    let u1 = 1.0 - r.u01(2 * j as u64);
                    let u2 = r.u01(2 * j as u64 + 1);
                    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
                })
                .collect()
        })
        .collect()
}

/// The checks behind `verify --all`.
pub fn run_suite(seed: u64, quick: bool) -> Result<Vec<BoundCheck>> {
    let trials = if quick { 4_000 } else { 40_000 };
    let mut out = Vec::new();
    out.push(check_reduce_exact(8)?);
    out.push(check_k_distribution(16, 7, if quick { 200_000 } else { 1_000_000 }, seed)?);
    for &(n, d) in &[(4usize, 16usize), (8, 64)] {
        let shards = gaussian_shards(n, d, seed ^ (n * d) as u64);
        let l2 = |c: GqsgdConfig| c.with_spec(NormSpec::L2);
        for cfg in [l2(GqsgdConfig::standard(4)?), l2(GqsgdConfig::exponential(4)?)] {
            let tag = format!("{:?} n={n} d={d}", cfg.scheme.kind()).to_lowercase();
            let mut c = check_unbiased(&shards, &cfg, trials, seed)?;
            c.name = format!("{} [{tag}]", c.name);
            out.push(c);
            let mut c = check_variance(&shards, &cfg, trials, seed)?;
            c.name = format!("{} [{tag}]", c.name);
            out.push(c);
        }
        let mut c = check_local_compressors(&shards, 2, trials, seed)?;
        c.name = format!("{} [n={n} d={d}]", c.name);
        out.push(c);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduce_exact_small_m() {
        for m in 2..=6 {
            let c = check_reduce_exact(m).unwrap();
            assert!(c.pass && c.trials > 0, "{c:?}");
        }
        assert!(check_reduce_exact(1).is_err());
    }

    #[test]
    fn reduce_exact_notices_a_wrong_law() {
        // shifting the probabilities by one level breaks exactness
        let m = 5;
        let val = |t: ExpToken| if t.exp == 0 { 0.0 } else { t.value() };
        let a = ExpToken { sign: 1, exp: 2 };
        let b = ExpToken { sign: 1, exp: 4 };
        let wrong: f64 = (1..=m)
            .map(|k| 0.5f64.powi(k.min(m - 1) as i32 + 1) * val(reduce_pair(a, b, k).unwrap()))
            .sum();
        assert_ne!(wrong, val(a) + val(b));
    }

    #[test]
    fn k_law() {
        assert!(check_k_distribution(12, 7, 100_000, 3).unwrap().pass);
        assert!(check_k_distribution(4, 4, 10, 3).is_err());
    }

    #[test]
    fn unbiased_trivial_cases() {
        let cfg = GqsgdConfig::exponential(4).unwrap();
        let zeros = vec![vec![0.0; 5]; 3];
        let c = check_unbiased(&zeros, &cfg, 100, 0).unwrap();
        assert!(c.pass && c.empirical == 0.0);
        let grid = vec![vec![1.0, 0.5, -0.25]; 2];
        let c = check_unbiased(&grid, &cfg, 100, 0).unwrap();
        assert!(c.pass && c.empirical == 0.0, "{c:?}");
    }

    #[test]
    fn unbiased_gaussian() {
        let shards = gaussian_shards(8, 64, 1);
        for cfg in [GqsgdConfig::standard(4).unwrap(), GqsgdConfig::exponential(4).unwrap()] {
            assert!(check_unbiased(&shards, &cfg, 20_000, 2).unwrap().pass);
        }
    }

    #[test]
    fn variance_single_worker_matches_one_node_bound() {
        let shards = gaussian_shards(1, 16, 4);
        let cfg = GqsgdConfig::standard(4).unwrap().with_spec(NormSpec::L2);
        let c = check_variance(&shards, &cfg, 20_000, 1).unwrap();
        assert!(c.pass, "{c:?}");
        assert_eq!(c.bound, 1.0);
    }

    #[test]
    fn sparsity_trivial_and_standard() {
        let mut one = vec![vec![0.0; 16]; 4];
        one[2][5] = 3.0;
        let c = check_sparsity(&one, &LevelScheme::standard(2).unwrap(), 1000, 0).unwrap();
        assert_eq!(c.empirical, 1.0);
        let shards = gaussian_shards(4, 64, 5);
        let c = check_sparsity(&shards, &LevelScheme::standard(1).unwrap(), 4000, 0).unwrap();
        assert!(c.pass, "{c:?}");
    }

    #[test]
    fn local_compressor_cases() {
        // a deterministic compressor: every entry on the local grid
        let grid = vec![vec![1.0, 0.0, 0.0, 0.0]; 3];
        let c = check_local_compressors(&grid, 1, 100, 0).unwrap();
        assert_eq!(c.empirical, 0.0);
        let shards = gaussian_shards(4, 32, 6);
        assert!(check_local_compressors(&shards, 1, 20_000, 0).unwrap().pass);
        let single = gaussian_shards(1, 32, 6);
        assert!(check_local_compressors(&single, 2, 20_000, 0).unwrap().pass);
    }

    #[test]
    fn reproducible() {
        let shards = gaussian_shards(4, 16, 9);
        let cfg = GqsgdConfig::exponential(3).unwrap();
        assert_eq!(check_variance(&shards, &cfg, 2000, 5).unwrap(), check_variance(&shards, &cfg, 2000, 5).unwrap());
    }
}
