use std::fmt::Write as _;
use std::fs;
use std::hint::black_box;
use std::net::TcpListener;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use gqsgd_core::algorithm::{empirical_compression_error, exact_mean, gqsgd_worker, quantize_rng};
use gqsgd_core::collectives::{self, f32_sum, TcpTransport, DEFAULT_TIMEOUT};
use gqsgd_core::exp_arith::leaf_token;
use gqsgd_core::perf_model::predict;
use gqsgd_core::quantizer::{global_norm, quantize_shard};
use gqsgd_core::trainer::{run_experiment, ExperimentConfig, TaskKind};
use gqsgd_core::verify::{gaussian_shards, run_suite};
use gqsgd_core::wire::{dense_len, sparse_len};
use gqsgd_core::{
    gqsgd_mean, Backend, BoundCheck, CostParams, CounterRng, Error, ExpToken, GqsgdOutput,
    ReduceContext, Threshold, Topology, TopologyKind, TrafficReport, Width,
};

use crate::args::*;
use crate::output::emit;
use crate::Status;

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::InvalidArgument(msg.into()).into()
}

fn read_shards(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut shards = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Error::InvalidInput(format!("{} line {}: {e}", path.display(), i + 1)))?;
        shards.push(row);
    }
    Ok(shards)
}

/// Shards from `--input`, or Gaussian shards for `workers` workers.
fn load_shards(data: &DataArgs, workers: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    match &data.input {
        Some(p) => {
            let shards = read_shards(p)?;
            if shards.len() != workers {
                return Err(usage(format!(
                    "{} has {} rows but --workers is {workers}",
                    p.display(),
                    shards.len()
                )));
            }
            Ok(shards)
        }
        None => Ok(gaussian_shards(workers, data.d, seed)),
    }
}

pub fn quantize(a: QuantizeArgs) -> Result<Status> {
    let cfg = a.scheme.config(Backend::Sim)?;
    let shards = load_shards(&a.data, a.scheme.workers, a.seed)?;
    let width = cfg.width_for(shards.len())?;
    let norm = global_norm(&shards, cfg.spec)?;
    let root = CounterRng::new(a.seed);

    let mut csv = String::from("worker,index,value,sign,level,decoded\n");
    let (mut nnz, mut dense_bytes, mut sparse_bytes) = (0, 0, 0);
    for (i, x) in shards.iter().enumerate() {
        let q = quantize_shard(x, norm, &cfg.scheme, quantize_rng(root, 0, i))?;
        for (j, &v) in x.iter().enumerate() {
            let lvl = q.level_idx[j];
            let dec = f64::from(q.signs[j]) * norm * cfg.scheme.level(lvl);
            writeln!(csv, "{i},{j},{v:e},{},{lvl},{dec:e}", q.signs[j])?;
        }
        let k = q.nnz(cfg.scheme.s());
        nnz += k;
        dense_bytes += dense_len(x.len(), width);
        sparse_bytes += sparse_len(k, width);
    }
    eprintln!(
        "norm {norm:e} ({}), width {} bits, nnz {nnz}, dense {dense_bytes} B, sparse {sparse_bytes} B",
        a.scheme.norm.name(),
        width.bits()
    );
    emit(a.out.as_deref(), &csv, "quantize", Some(a.seed), &a)?;
    Ok(Status::Ok)
}

fn traffic_line(label: &str, t: &TrafficReport) -> String {
    let max = t.bytes_per_worker.iter().max().copied().unwrap_or(0);
    format!(
        "{label}: {} payload bytes (max {max} per worker), {} steps, {} messages, {} header bytes",
        t.bytes_sent_total, t.steps, t.messages, t.header_bytes
    )
}

fn mean_csv(exact: &[f64], est: &[f64]) -> Result<String> {
    let mut csv = String::from("index,exact,estimate\n");
    for (j, (e, g)) in exact.iter().zip(est).enumerate() {
        writeln!(csv, "{j},{e:e},{g:e}")?;
    }
    Ok(csv)
}

fn rel_error(exact: &[f64], est: &[f64]) -> f64 {
    let num: f64 = exact.iter().zip(est).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = exact.iter().map(|a| a * a).sum();
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

pub fn allreduce(a: AllreduceArgs) -> Result<Status> {
    if a.net.listen.is_some() {
        return allreduce_process(a);
    }
    let cfg = a.scheme.config(a.net.transport.into())?;
    let shards = load_shards(&a.data, a.scheme.workers, a.seed)?;
    let exact = exact_mean(&shards)?;
    let out: GqsgdOutput = gqsgd_mean(&shards, &cfg, CounterRng::new(a.seed), 0)?;
    eprintln!("norm {:e}, width {} bits", out.norm, out.width.bits());
    eprintln!("{}", traffic_line("payload", &out.traffic));
    eprintln!("{}", traffic_line("norm exchange", &out.norm_traffic));
    eprintln!("relative error of this estimate {:e}", rel_error(&exact, out.mean()));
    if a.trials > 0 {
        let e = empirical_compression_error(&shards, &cfg, a.trials, a.seed)?;
        eprintln!("expected relative error {:e} (se {:e}, {} trials)", e.mean, e.se, e.trials);
    }
    emit(a.out.as_deref(), &mean_csv(&exact, out.mean())?, "allreduce", Some(a.seed), &a)?;
    Ok(Status::Ok)
}

/// One worker of a multi-process job; the rank is the position of
/// `--listen` in `--peers`.
fn allreduce_process(a: AllreduceArgs) -> Result<Status> {
    let listen = a.net.listen.expect("checked by caller");
    let peers = &a.net.peers;
    let rank = peers
        .iter()
        .position(|p| *p == listen)
        .ok_or_else(|| usage(format!("--listen {listen} is not one of --peers")))?;
    if a.net.transport != TransportArg::Tcp {
        return Err(usage("--listen and --peers need --transport tcp"));
    }
    if a.scheme.workers != peers.len() {
        return Err(usage(format!(
            "--workers is {} but {} peers were given",
            a.scheme.workers,
            peers.len()
        )));
    }
    if a.trials > 0 {
        return Err(usage("--trials is not available in multi-process mode"));
    }
    let cfg = a.scheme.config(Backend::Tcp)?;
    let shards = load_shards(&a.data, peers.len(), a.seed)?;
    let topo = Topology::new(peers.len(), cfg.topology)?;
    let listener = TcpListener::bind(listen).with_context(|| format!("binding {listen}"))?;
    let mut t = TcpTransport::connect(rank, listener, peers, DEFAULT_TIMEOUT)?;
    let r = gqsgd_worker(&mut t, &shards[rank], &cfg, &topo, CounterRng::new(a.seed), 0)?;
    let exact = exact_mean(&shards)?;
    eprintln!(
        "rank {rank}/{}: norm {:e}, sent {} payload bytes in {} messages, relative error {:e}",
        peers.len(),
        r.norm,
        r.data.bytes_sent,
        r.data.messages,
        rel_error(&exact, &r.mean)
    );
    emit(a.out.as_deref(), &mean_csv(&exact, &r.mean)?, "allreduce", Some(a.seed), &a)?;
    Ok(Status::Ok)
}

fn experiment_config(a: &TrainArgs) -> Result<ExperimentConfig> {
    let mut c = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ExperimentConfig::from_toml(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(t) = a.task {
        c.task = match t {
            TaskArg::Quadratic => TaskKind::Quadratic,
            TaskArg::Logistic => TaskKind::Logistic,
        };
    }
    macro_rules! set {
        ($($field:ident => $target:ident),*) => {
            $(if let Some(v) = a.$field { c.$target = v; })*
        };
    }
    set!(workers => n, d => d, rows => rows, noise => noise, steps => steps, seed => seed);
    if a.lr.is_some() {
        c.lr = a.lr;
    }
    if a.batch.is_some() {
        c.batch = a.batch;
    }
    if a.s.is_some() {
        c.s = a.s;
    }
    if a.width.is_some() {
        c.width = a.width;
    }
    if let Some(s) = a.scheme {
        c.scheme = match s {
            TrainSchemeArg::None => "none",
            TrainSchemeArg::Standard => "standard",
            TrainSchemeArg::Exponential => "exponential",
        }
        .into();
    }
    if let Some(n) = a.norm {
        c.norm = n.name().into();
    }
    if a.sparse {
        c.sparse = true;
    }
    if let Some(t) = a.topo {
        c.topo = t.into();
    }
    if let Some(t) = a.transport {
        c.backend = t.into();
    }
    Ok(c)
}

pub fn train(a: TrainArgs) -> Result<Status> {
    let cfg = experiment_config(&a)?;
    let task = cfg.build_task()?;
    let tc = cfg.train_config()?;
    let traj = run_experiment(&task, &tc)?;
    let last = traj.rows.last().expect("at least one row");
    eprintln!(
        "{} steps, final loss {:e}, suboptimality {:e}, {} payload bytes",
        cfg.steps,
        last.loss,
        task.suboptimality(&traj.final_x).unwrap_or(f64::NAN),
        traj.traffic.bytes_sent_total
    );
    emit(a.out.as_deref(), &traj.to_csv(), "train", Some(cfg.seed), &cfg)?;
    Ok(Status::Ok)
}

pub fn perf(a: PerfArgs) -> Result<Status> {
    let p = CostParams {
        alpha: a.alpha,
        beta: a.beta,
        gamma: a.gamma,
        omega: a.omega,
        rho: a.rho,
        size: a.size,
        workers: a.workers,
        delta: a.delta,
    };
    let pr = predict(&p)?;
    let mut report = String::new();
    writeln!(report, "baseline  {:.6e} s", pr.baseline)?;
    writeln!(report, "quantized {:.6e} s", pr.quantized)?;
    writeln!(report, "speedup   {:.4}", pr.speedup)?;
    match pr.threshold {
        Threshold::Always => writeln!(report, "beta_max  none (quantization wins at every bandwidth)")?,
        Threshold::Never => writeln!(report, "beta_max  none (quantization never wins)")?,
        Threshold::Below(b) => writeln!(report, "beta_max  {b:.6e} B/s = {:.4} gamma", b / p.gamma)?,
    }
    writeln!(report, "faster at beta={:e}: {}", p.beta, if pr.faster { "yes" } else { "no" })?;
    print!("{report}");
    if let Some(out) = &a.out {
        #[derive(Serialize)]
        struct Report<'a> {
            params: &'a CostParams,
            prediction: gqsgd_core::perf_model::Prediction,
        }
        let mut json = serde_json::to_string_pretty(&Report { params: &p, prediction: pr })?;
        json.push('\n');
        emit(Some(out), &json, "perf", None, &a)?;
    }
    Ok(Status::Ok)
}

pub fn verify(a: VerifyArgs) -> Result<Status> {
    let checks = run_suite(a.seed, !a.all)?;
    let mut csv = format!("{}\n", BoundCheck::csv_header());
    for c in &checks {
        writeln!(csv, "{}", c.csv_row())?;
    }
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    for c in &checks {
        println!(
            "{} {:<width$}  {:>12.5e} <= {:>12.5e} + {:.2e}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.empirical,
            c.bound,
            c.radius
        );
    }
    if let Some(out) = &a.out {
        emit(Some(out), &csv, "verify", Some(a.seed), &a)?;
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    Ok(if failed == 0 {
        Status::Ok
    } else {
        Status::ChecksFailed(failed)
    })
}

/// Best of `reps` timings, in seconds.
fn best_of(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..reps.max(1) {
        let t0 = Instant::now();
        f()?;
        best = best.min(t0.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// Element cap for the collective part of the benchmark.
const BENCH_COLLECTIVE_ELEMS: usize = 1 << 20;

pub fn bench(a: BenchArgs) -> Result<Status> {
    if a.size == 0 {
        bail!(usage("--size must be at least 1 byte"));
    }
    let cfg = a.scheme.config(a.transport.into())?;
    let n = a.scheme.workers;
    let elems = a.size.div_ceil(4);
    let x = gaussian_shards(1, elems, a.seed).remove(0);
    let norm = global_norm(std::slice::from_ref(&x), cfg.spec)?;
    let root = CounterRng::new(a.seed);
    let mut r = String::new();
    writeln!(r, "size {} B ({elems} f32 elements), {n} workers", a.size)?;

    let tq = best_of(a.reps, || {
        black_box(quantize_shard(black_box(&x), norm, &cfg.scheme, root)?);
        Ok(())
    })?;
    writeln!(r, "quantize        {:>10.3} MB/s", 4.0 * elems as f64 / tq / 1e6)?;

    // native reduction: f32 sums
    let mut acc: Vec<f32> = x.iter().map(|&v| v as f32).collect();
    let other = acc.clone();
    let t_native = best_of(a.reps, || {
        for (p, q) in acc.iter_mut().zip(&other) {
            *p += q;
        }
        black_box(&acc);
        Ok(())
    })?;
    let gamma = 4.0 * elems as f64 / t_native;
    writeln!(r, "f32 reduce      {:>10.3} MB/s (gamma)", gamma / 1e6)?;

    // exponential token reduction at 8 bits
    let ctx = ReduceContext::new(7, 2, Width::W8)?;
    let leaves: Vec<ExpToken> = (0..elems)
        .map(|j| leaf_token(if j % 3 == 0 { -1 } else { 1 }, 1 + (j % 7) as u32, 7, 2))
        .collect();
    let t_exp = best_of(a.reps, || {
        let mut buf = leaves.clone();
        ctx.reduce_into(&mut buf, &leaves, root, 0)?;
        black_box(buf);
        Ok(())
    })?;
    let gamma_hat = elems as f64 / t_exp;
    writeln!(r, "exp reduce (8b) {:>10.3} MB/s (gamma_hat)", gamma_hat / 1e6)?;
    writeln!(r, "omega           {:>10.5}", gamma_hat / gamma)?;

    let d = elems.min(BENCH_COLLECTIVE_ELEMS);
    let shards = gaussian_shards(n, d, a.seed);
    let topo = Topology::new(n, cfg.topology)?;
    let bufs: Vec<Vec<f32>> = shards.iter().map(|s| s.iter().map(|&v| v as f32).collect()).collect();
    let mut base = None;
    let t_base = best_of(a.reps, || {
        let (_, t) = collectives::allreduce(cfg.backend, &topo, bufs.clone(), Width::W32, 0, &f32_sum)?;
        base = Some(t);
        Ok(())
    })?;
    let mut quant = None;
    let t_quant = best_of(a.reps, || {
        quant = Some(gqsgd_mean(&shards, &cfg, root, 0)?);
        Ok(())
    })?;
    let (base, quant) = (base.expect("ran"), quant.expect("ran"));
    writeln!(r, "collective over {d} elements, {:?} backend", cfg.backend)?;
    writeln!(r, "  f32 allreduce       {:>10.3} ms, {:>12} payload B", 1e3 * t_base, base.bytes_sent_total)?;
    writeln!(
        r,
        "  quantized ({:>2} bit)  {:>10.3} ms, {:>12} payload B",
        quant.width.bits(),
        1e3 * t_quant,
        quant.traffic.bytes_sent_total
    )?;
    let tree = Topology::new(n, TopologyKind::BinaryTree)?;
    let ring = Topology::new(n, TopologyKind::Ring)?;
    writeln!(r, "steps: tree {}, ring {}", tree.steps(), ring.steps())?;
    print!("{r}");
    if let Some(out) = &a.out {
        emit(Some(out), &r, "bench", Some(a.seed), &a)?;
    }
    Ok(Status::Ok)
}
