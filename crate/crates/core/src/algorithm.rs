//! Distributed mean estimation: norm exchange, local quantization and
//! aggregation over dense Allreduce or sparse Allgather.

use rayon::prelude::*;
use serde::Serialize;

use crate::collectives::{
    allgather, allgather_worker, allreduce, allreduce_worker, int_sum, norm_allreduce,
    norm_allreduce_worker, run_cluster, Backend, ReduceSite, Topology, TopologyKind,
    TrafficReport, Transport, WorkerTraffic,
};
use crate::error::{Error, Result};
use crate::exp_arith::{check_width, leaf_token, scale_factor, ExpToken, ReduceContext};
use crate::quantizer::{
    accumulate_sparse, local_norm_stat, quantize_shard, to_sparse, LevelKind, LevelScheme,
    NormSpec, QuantizedShard,
};
use crate::rng::{domain, CounterRng};
use crate::wire::{decode_sparse, encode_sparse, Width};

#[derive(Clone, Debug, PartialEq)]
pub struct GqsgdConfig {
    pub scheme: LevelScheme,
    pub spec: NormSpec,
    /// Allgather of non-zero coefficients instead of a dense Allreduce.
    pub sparse: bool,
    /// Wire integer width; the smallest admissible one when `None`.
    pub width: Option<Width>,
    pub topology: TopologyKind,
    pub backend: Backend,
}

impl GqsgdConfig {
    pub fn new(scheme: LevelScheme) -> Self {
        Self {
            scheme,
            spec: NormSpec::default(),
            sparse: false,
            width: None,
            topology: TopologyKind::BinaryTree,
            backend: Backend::Sim,
        }
    }

    pub fn standard(s: u32) -> Result<Self> {
        Ok(Self::new(LevelScheme::standard(s)?))
    }

    pub fn exponential(s: u32) -> Result<Self> {
        Ok(Self::new(LevelScheme::exponential(s)?))
    }

    pub fn with_spec(mut self, spec: NormSpec) -> Self {
        self.spec = spec;
        self
    }

    pub fn with_sparse(mut self, sparse: bool) -> Self {
        self.sparse = sparse;
        self
    }

    pub fn with_width(mut self, width: Option<Width>) -> Self {
        self.width = width;
        self
    }

    pub fn with_topology(mut self, topology: TopologyKind) -> Self {
        self.topology = topology;
        self
    }

    pub fn with_backend(mut self, backend: Backend) -> Self {
        self.backend = backend;
        self
    }

    fn admits(&self, n: usize, w: Width) -> bool {
        let s = self.scheme.s();
        if self.sparse {
            return u64::from(s - 1) <= w.max_unsigned();
        }
        check_width(s, n, w.bits(), self.scheme.kind())
    }

    /// The wire width used for `n` workers.
    pub fn width_for(&self, n: usize) -> Result<Width> {
        if !self.sparse && self.scheme.kind() == LevelKind::Custom {
            return Err(Error::RefusedConfiguration(
                "custom grids cannot be summed as integers; use the sparse path".into(),
            ));
        }
        // ring chains of up to n - 1 stochastic additions can leave the
        // pre-scaled range; tree subtrees cannot
        if !self.sparse && self.scheme.kind() == LevelKind::Exponential && self.topology == TopologyKind::Ring && n > 2 {
            return Err(Error::RefusedConfiguration(
                "dense exponential dithering over a ring of more than 2 workers can overflow; use the tree or the sparse path".into(),
            ));
        }
        match self.width {
            Some(w) if self.admits(n, w) => Ok(w),
            Some(w) => Err(Error::RefusedConfiguration(format!(
                "{:?} dithering with s={} over {n} workers does not fit {}-bit integers",
                self.scheme.kind(),
                self.scheme.s(),
                w.bits()
            ))),
            None => Width::ALL.into_iter().find(|&w| self.admits(n, w)).ok_or_else(|| {
                Error::RefusedConfiguration(format!(
                    "s={} over {n} workers does not fit any supported width",
                    self.scheme.s()
                ))
            }),
        }
    }
}

/// Result of one distributed mean estimation.
#[derive(Clone, Debug, PartialEq)]
pub struct GqsgdOutput {
    /// One estimate per worker; all are bit-identical.
    pub outputs: Vec<Vec<f64>>,
    pub norm: f64,
    pub width: Width,
    /// Quantized payload traffic.
    pub traffic: TrafficReport,
    /// Traffic of the norm exchange, kept apart from `traffic`.
    pub norm_traffic: TrafficReport,
}

impl GqsgdOutput {
    pub fn mean(&self) -> &[f64] {
        &self.outputs[0]
    }
}

pub fn quantize_rng(root: CounterRng, round: u32, worker: usize) -> CounterRng {
    root.fork(domain::QUANTIZE)
        .fork(u64::from(round))
        .fork(worker as u64)
}

fn reduce_rng(root: CounterRng, round: u32) -> CounterRng {
    root.fork(domain::REDUCE).fork(u64::from(round))
}

fn std_leaf(q: &QuantizedShard, s: u32) -> Vec<i32> {
    q.signs
        .iter()
        .zip(&q.level_idx)
        .map(|(&sg, &i)| i32::from(sg) * (s - i) as i32)
        .collect()
}

fn std_finish(sums: &[i32], norm: f64, n: usize, s: u32) -> Vec<f64> {
    let denom = n as f64 * f64::from(s);
    sums.iter().map(|&v| norm * (f64::from(v) / denom)).collect()
}

fn exp_leaf(q: &QuantizedShard, s: u32, n: usize) -> Vec<ExpToken> {
    q.signs
        .iter()
        .zip(&q.level_idx)
        .map(|(&sg, &i)| leaf_token(sg, i, s, n))
        .collect()
}

fn exp_finish(tokens: &[ExpToken], norm: f64, n: usize) -> Vec<f64> {
    let f = scale_factor(n).expect("n >= 1");
    tokens.iter().map(|t| norm * (t.value() * f / n as f64)).collect()
}

fn exp_reduce(
    ctx: ReduceContext,
    rng: CounterRng,
) -> impl Fn(&mut [ExpToken], &[ExpToken], ReduceSite) -> Result<()> + Sync {
    move |acc, other, site| {
        let r = rng.fork(u64::from(site.step)).fork(site.dst as u64);
        ctx.reduce_into(acc, other, r, site.offset as u64)
    }
}

fn sparse_blob(q: &QuantizedShard, scheme: &LevelScheme, w: Width) -> Result<Vec<u8>> {
    encode_sparse(q.norm, &to_sparse(q, scheme), w)
}

fn sparse_finish(
    blobs: &[Vec<u8>],
    scheme: &LevelScheme,
    norm: f64,
    d: usize,
    w: Width,
) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; d];
    for (i, b) in blobs.iter().enumerate() {
        let (their_norm, p) = decode_sparse(b, w)?;
        if their_norm.to_bits() != norm.to_bits() {
            return Err(Error::Protocol(format!(
                "worker {i} quantized against norm {their_norm}, expected {norm}"
            )));
        }
        if p.d as usize != d {
            return Err(Error::corrupt(format!("worker {i} sent d={}, expected {d}", p.d)));
        }
        p.validate(scheme.s())?;
        accumulate_sparse(&p, scheme, norm, &mut acc);
    }
    let n = blobs.len() as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    Ok(acc)
}

fn check_shards(shards: &[Vec<f64>]) -> Result<usize> {
    let d = shards
        .first()
        .ok_or_else(|| Error::invalid_arg("at least one shard is required"))?
        .len();
    if let Some(i) = shards.iter().position(|x| x.len() != d) {
        return Err(Error::invalid_arg(format!(
            "shard {i} has {} elements, expected {d}",
            shards[i].len()
        )));
    }
    Ok(d)
}

/// Unbiased estimate of the mean of `shards`, computed as a collective.
pub fn gqsgd_mean(
    shards: &[Vec<f64>],
    cfg: &GqsgdConfig,
    rng: CounterRng,
    round: u32,
) -> Result<GqsgdOutput> {
    let d = check_shards(shards)?;
    let n = shards.len();
    let topo = Topology::new(n, cfg.topology)?;
    let w = cfg.width_for(n)?;
    if cfg.backend != Backend::Sim {
        let results = run_cluster(cfg.backend, n, |t| {
            let me = t.rank();
            gqsgd_worker(t, &shards[me], cfg, &topo, rng, round)
        })?;
        let data: Vec<_> = results.iter().map(|r| r.data).collect();
        let norms: Vec<_> = results.iter().map(|r| r.norm_traffic).collect();
        let data_steps = if cfg.sparse { u32::from(n > 1) } else { topo.steps() };
        return Ok(GqsgdOutput {
            norm: results[0].norm,
            width: w,
            traffic: TrafficReport::from_workers(data_steps, &data),
            norm_traffic: TrafficReport::from_workers(topo.steps(), &norms),
            outputs: results.into_iter().map(|r| r.mean).collect(),
        });
    }

    let stats = shards
        .iter()
        .map(|x| local_norm_stat(x, cfg.spec))
        .collect::<Result<Vec<_>>>()?;
    let (norms, norm_traffic) = norm_allreduce(Backend::Sim, &stats, cfg.spec, &topo, round)?;
    let norm = norms[0];
    let scheme = &cfg.scheme;
    let s = scheme.s();
    let quantized = shards
        .iter()
        .enumerate()
        .map(|(i, x)| quantize_shard(x, norms[i], scheme, quantize_rng(rng, round, i)))
        .collect::<Result<Vec<_>>>()?;

    let (outputs, traffic) = if cfg.sparse {
        let blobs = quantized
            .iter()
            .map(|q| sparse_blob(q, scheme, w))
            .collect::<Result<Vec<_>>>()?;
        let (gathered, traffic) = allgather(Backend::Sim, blobs, round)?;
        // every worker holds the same blobs, so one decode serves all
        let mean = sparse_finish(&gathered[0], scheme, norm, d, w)?;
        (vec![mean; n], traffic)
    } else {
        match scheme.kind() {
            LevelKind::Standard => {
                let bufs = quantized.iter().map(|q| std_leaf(q, s)).collect();
                let (sums, traffic) = allreduce(Backend::Sim, &topo, bufs, w, round, &int_sum(w))?;
                let outs = sums.iter().map(|v| std_finish(v, norm, n, s)).collect();
                (outs, traffic)
            }
            LevelKind::Exponential => {
                let ctx = ReduceContext::new(s, n, w)?;
                let bufs = quantized.iter().map(|q| exp_leaf(q, s, n)).collect();
                let reduce = exp_reduce(ctx, reduce_rng(rng, round));
                let (toks, traffic) = allreduce(Backend::Sim, &topo, bufs, w, round, &reduce)?;
                let outs = toks.iter().map(|t| exp_finish(t, norm, n)).collect();
                (outs, traffic)
            }
            LevelKind::Custom => unreachable!("rejected by width_for"),
        }
    };
    Ok(GqsgdOutput {
        outputs,
        norm,
        width: w,
        traffic,
        norm_traffic,
    })
}

/// One worker's view of [`gqsgd_mean`].
#[derive(Clone, Debug, PartialEq)]
pub struct WorkerResult {
    pub mean: Vec<f64>,
    pub norm: f64,
    pub data: WorkerTraffic,
    pub norm_traffic: WorkerTraffic,
}

/// The per-worker program behind [`gqsgd_mean`], for use over any transport.
/// Produces the same bits as the simulated cluster for the same `rng` and `round`.
pub fn gqsgd_worker(
    t: &mut dyn Transport,
    x: &[f64],
    cfg: &GqsgdConfig,
    topo: &Topology,
    rng: CounterRng,
    round: u32,
) -> Result<WorkerResult> {
    let (me, n) = (t.rank(), t.world());
    let w = cfg.width_for(n)?;
    let scheme = &cfg.scheme;
    let s = scheme.s();
    let stat = local_norm_stat(x, cfg.spec)?;
    let (norm, norm_traffic) = norm_allreduce_worker(t, stat, cfg.spec, topo, round)?;
    let q = quantize_shard(x, norm, scheme, quantize_rng(rng, round, me))?;

    let (mean, data) = if cfg.sparse {
        let (blobs, traffic) = allgather_worker(t, &sparse_blob(&q, scheme, w)?, round)?;
        (sparse_finish(&blobs, scheme, norm, x.len(), w)?, traffic)
    } else {
        match scheme.kind() {
            LevelKind::Standard => {
                let mut buf = std_leaf(&q, s);
                let traffic = allreduce_worker(t, topo, &mut buf, w, round, &int_sum(w))?;
                (std_finish(&buf, norm, n, s), traffic)
            }
            LevelKind::Exponential => {
                let ctx = ReduceContext::new(s, n, w)?;
                let mut buf = exp_leaf(&q, s, n);
                let reduce = exp_reduce(ctx, reduce_rng(rng, round));
                let traffic = allreduce_worker(t, topo, &mut buf, w, round, &reduce)?;
                (exp_finish(&buf, norm, n), traffic)
            }
            LevelKind::Custom => unreachable!("rejected by width_for"),
        }
    };
    Ok(WorkerResult {
        mean,
        norm,
        data,
        norm_traffic,
    })
}

/// Exact mean of the shards, summed in worker order.
pub fn exact_mean(shards: &[Vec<f64>]) -> Result<Vec<f64>> {
    let d = check_shards(shards)?;
    let mut acc = vec![0.0; d];
    for x in shards {
        acc.iter_mut().zip(x).for_each(|(a, v)| *a += v);
    }
    let n = shards.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Monte-Carlo estimate of `E||G(xx) - mean||^2 / ||mean||^2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ErrorEstimate {
    pub mean: f64,
    /// Standard error of `mean`.
    pub se: f64,
    pub trials: usize,
}

impl ErrorEstimate {
    /// Upper end of the 4-standard-error interval.
    pub fn upper(&self) -> f64 {
        self.mean + 4.0 * self.se
    }
}

/// Mean and standard error of `f(t)` over `trials` independent trials.
///
/// Trials run in parallel, but the reduction order is fixed so the result is
/// reproducible.
pub fn monte_carlo<F>(trials: usize, f: F) -> Result<(f64, f64)>
where
    F: Fn(u64) -> Result<f64> + Sync + Send,
{
    if trials < 2 {
        return Err(Error::invalid_arg("at least two trials are needed"));
    }
    let vals = (0..trials as u64)
        .into_par_iter()
        .map(f)
        .collect::<Result<Vec<f64>>>()?;
    let mean = vals.iter().sum::<f64>() / trials as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
    Ok((mean, (var / trials as f64).sqrt()))
}

pub fn empirical_compression_error(
    shards: &[Vec<f64>],
    cfg: &GqsgdConfig,
    trials: usize,
    seed: u64,
) -> Result<ErrorEstimate> {
    if trials < 1000 {
        return Err(Error::invalid_arg("at least 1000 trials are required"));
    }
    let xbar = exact_mean(shards)?;
    let denom: f64 = xbar.iter().map(|v| v * v).sum();
    if denom == 0.0 {
        if shards.iter().flatten().all(|&v| v == 0.0) {
            return Ok(ErrorEstimate {
                mean: 0.0,
                se: 0.0,
                trials,
            });
        }
        return Err(Error::UndefinedRelativeError);
    }
    let root = CounterRng::new(seed).fork(domain::TRIAL);
    let (mean, se) = monte_carlo(trials, |t| {
        let out = gqsgd_mean(shards, cfg, root.fork(t), 0)?;
        let err: f64 = out.mean().iter().zip(&xbar).map(|(a, b)| (a - b).powi(2)).sum();
        Ok(err / denom)
    })?;
    Ok(ErrorEstimate { mean, se, trials })
}
