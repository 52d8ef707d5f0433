//! Acceptance suite: one PASS/FAIL line per criterion, exit code 1 if any fails.

use std::time::{Duration, Instant};

use gqsgd_core::algorithm::{empirical_compression_error, gqsgd_mean, GqsgdConfig};
use gqsgd_core::collectives::{allreduce, f32_sum, Backend, Topology, TopologyKind};
use gqsgd_core::exp_arith::check_width;
use gqsgd_core::perf_model::{predict, speedup_threshold, CostParams, Threshold};
use gqsgd_core::trainer::{sgd_step, theta_hat, Task, TrainConfig, TrainState};
use gqsgd_core::verify::{
    check_k_distribution, check_reduce_exact, check_sparsity, check_tree_inflation,
    check_unbiased, check_variance, gaussian_shards, BoundCheck,
};
use gqsgd_core::{CounterRng, LevelKind, LevelScheme, NormSpec, Width};

// Pinned tolerances.
const Z: f64 = 4.0;
const EXACT_M: u32 = 8;
const K_DRAWS: usize = 1_000_000;
const UNBIASED_TRIALS: usize = 100_000;
const VARIANCE_TRIALS: usize = 20_000;
const SPARSITY_TRIALS: usize = 10_000;
const INFLATION_BOUND: f64 = 1.6;
const INFLATION_TRIALS: usize = 5_000;
const THRESHOLD_REL_TOL: f64 = 1e-12;
const PERF_DRAWS: u64 = 10_000;
const ITERATION_MARGIN: f64 = 0.25;
const CONVERGENCE_SEEDS: u64 = 5;
const TARGET_REDUCTION: f64 = 1e-2;
const ERROR_BUDGET: f64 = 0.005;
const ERROR_TRIALS: usize = 2_000;
const TRANSPORT_RUNS: u64 = 100;

const GRID_N: [usize; 3] = [2, 4, 8];
const GRID_D: [usize; 2] = [16, 64];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn worst<'a>(checks: impl IntoIterator<Item = &'a BoundCheck>) -> (bool, String) {
    let mut first_fail = None;
    let mut n = 0;
    for c in checks {
        n += 1;
        if !c.pass && first_fail.is_none() {
            first_fail = Some(format!(
                "{}: {:.4e} > {:.4e} + {:.2e}",
                c.name, c.empirical, c.bound, c.radius
            ));
        }
    }
    match first_fail {
        None => (true, format!("{n} checks within bounds")),
        Some(f) => (false, f),
    }
}

fn c1() -> Outcome {
    let c = check_reduce_exact(EXACT_M).unwrap();
    outcome(c.pass, format!("{} token pairs, {} mismatches", c.trials, c.empirical))
}

fn c2() -> Outcome {
    let c = check_k_distribution(EXACT_M, 7, K_DRAWS, 2).unwrap();
    outcome(c.pass, format!("max z-score {:.2} over b=0..7 (limit {Z})", c.empirical))
}

fn grid_configs(n: usize, d: usize) -> Vec<(String, GqsgdConfig)> {
    let _ = d;
    vec![
        (format!("standard s=15 n={n}"), GqsgdConfig::standard(15).unwrap()),
        (format!("exponential s=7 n={n}"), GqsgdConfig::exponential(7).unwrap()),
    ]
    .into_iter()
    .map(|(tag, c)| (tag, c.with_width(None)))
    .collect()
}

fn c3() -> Outcome {
    let mut checks = Vec::new();
    for n in GRID_N {
        for d in GRID_D {
            let shards = gaussian_shards(n, d, 100 + (n * d) as u64);
            for (tag, cfg) in grid_configs(n, d) {
                let mut c = check_unbiased(&shards, &cfg, UNBIASED_TRIALS, 3).unwrap();
                c.name = format!("{tag} d={d}");
                checks.push(c);
            }
        }
    }
    let max_z = checks.iter().map(|c| c.empirical).fold(0.0, f64::max);
    let (pass, msg) = worst(&checks);
    outcome(pass, format!("{msg}; max z-score {max_z:.2}"))
}

fn c4() -> Outcome {
    let mut checks = Vec::new();
    for n in GRID_N {
        for d in GRID_D {
            let shards = gaussian_shards(n, d, 200 + (n * d) as u64);
            let nd = (n * d) as f64;
            let s_std = nd.sqrt().floor() as u32;
            let s_exp = (1.0 + nd.sqrt().log2()).floor() as u32;
            for (kind, s) in [(LevelKind::Standard, s_std), (LevelKind::Exponential, s_exp)] {
                let cfg = GqsgdConfig::new(LevelScheme::build(kind, s).unwrap()).with_spec(NormSpec::L2);
                let mut c = check_variance(&shards, &cfg, VARIANCE_TRIALS, 4).unwrap();
                c.name = format!("{kind:?} s={s} n={n} d={d}");
                checks.push(c);
            }
        }
    }
    let ratio = checks.iter().map(|c| c.empirical / c.bound).fold(0.0, f64::max);
    let (pass, msg) = worst(&checks);
    outcome(pass, format!("{msg}; largest empirical/bound {ratio:.3}"))
}

fn c5() -> Outcome {
    let mut checks = Vec::new();
    for n in GRID_N {
        for d in GRID_D {
            let shards = gaussian_shards(n, d, 300 + (n * d) as u64);
            for kind in [LevelKind::Standard, LevelKind::Exponential] {
                for s in [1, 2, 3] {
                    let scheme = LevelScheme::build(kind, s).unwrap();
                    let mut c = check_sparsity(&shards, &scheme, SPARSITY_TRIALS, 5).unwrap();
                    c.name = format!("{kind:?} s={s} n={n} d={d}");
                    checks.push(c);
                }
            }
        }
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    let (pass, msg) = worst(&checks);
    outcome(pass, format!("{msg}; {failed}/{} configurations over the bound", checks.len()))
}

/// Per-worker full gradients along an exact gradient-descent run on the
/// quadratic task, sampled every 5 steps over the first 20 (after that the
/// mean gradient vanishes while worker gradients do not).
fn gradient_traces(n: usize, seed: u64) -> Vec<Vec<Vec<f64>>> {
    let task = Task::quadratic(n, 256, 128, 0.1, seed).unwrap();
    let cfg = TrainConfig {
        steps: 20,
        lr: None,
        batch: None,
        seed,
        compression: None,
        topology: TopologyKind::BinaryTree,
    };
    let mut st = TrainState::new(n, vec![0.0; 256]);
    let mut out = Vec::new();
    for k in 0..20 {
        if k % 5 == 0 {
            out.push((0..n).map(|i| task.local_grad(i, st.x(), None)).collect());
        }
        sgd_step(&mut st, &task, &cfg).unwrap();
    }
    out
}

fn c6() -> Outcome {
    let mut checks = Vec::new();
    let mut var_ratios = Vec::new();
    for (i, shards) in gradient_traces(16, 6).iter().enumerate() {
        let r = check_tree_inflation(shards, 7, INFLATION_BOUND, INFLATION_TRIALS, 60 + i as u64).unwrap();
        checks.push(r.second_moment);
        var_ratios.push(r.variance_ratio);
    }
    let ratios: Vec<String> = checks.iter().map(|c| format!("{:.3}", c.empirical)).collect();
    let vr: Vec<String> = var_ratios.iter().map(|v| format!("{v:.2}")).collect();
    let (pass, msg) = worst(&checks);
    outcome(
        pass,
        format!(
            "{msg}; second-moment ratios [{}] vs {INFLATION_BOUND}; centred variance ratios [{}]",
            ratios.join(", "),
            vr.join(", ")
        ),
    )
}

fn c7() -> Outcome {
    let gamma = 2e12;
    let ok_bound = match speedup_threshold(1.0 / 79.0, 4.0, gamma).unwrap() {
        Threshold::Below(b) => ((b - 0.08 * gamma) / (0.08 * gamma)).abs() <= THRESHOLD_REL_TOL,
        _ => false,
    };
    let ok_always = speedup_threshold(1.0, 4.0, gamma).unwrap() == Threshold::Always;
    let rng = CounterRng::new(7);
    let mut disagree = 0;
    let mut skipped = 0;
    for t in 0..PERF_DRAWS {
        let u = |k: u64| rng.fork(t).u01(k);
        let p = CostParams {
            alpha: 10f64.powf(-7.0 + 3.0 * u(0)),
            beta: 10f64.powf(8.0 + 4.0 * u(1)),
            gamma: 10f64.powf(10.0 + 3.0 * u(2)),
            omega: 10f64.powf(-2.5 + 3.0 * u(3)),
            rho: 1.0 + 7.0 * u(4),
            size: 10f64.powf(4.0 + 5.0 * u(5)),
            workers: 2 + (u(6) * 62.0) as usize,
            delta: 0.0,
        };
        let pr = predict(&p).unwrap();
        if (pr.baseline - pr.quantized).abs() <= 1e-12 * pr.baseline {
            skipped += 1;
            continue;
        }
        if pr.faster != pr.threshold.admits(p.beta) {
            disagree += 1;
        }
    }
    outcome(
        ok_bound && ok_always && disagree == 0,
        format!(
            "beta_max(1/79, 4) = 0.08 gamma: {ok_bound}; (1, 4) Always: {ok_always}; \
             {disagree} disagreements in {PERF_DRAWS} draws ({skipped} exact ties skipped)"
        ),
    )
}

fn c8() -> Outcome {
    let mut ok = true;
    let mut cases = 0;
    let mut kinds = std::collections::BTreeSet::new();
    for kind in [TopologyKind::BinaryTree, TopologyKind::Ring] {
        for n in [2usize, 4, 8, 16] {
            let d = 1024;
            let shards = gaussian_shards(n, d, 8);
            let topo = Topology::new(n, kind).unwrap();
            let f32_bufs: Vec<Vec<f32>> = shards.iter().map(|x| x.iter().map(|&v| v as f32).collect()).collect();
            let (_, base) = allreduce(Backend::Sim, &topo, f32_bufs, Width::W32, 0, &f32_sum).unwrap();
            for cfg in [GqsgdConfig::exponential(7).unwrap(), GqsgdConfig::standard(7).unwrap()] {
                let cfg = cfg.with_width(Some(Width::W8)).with_topology(kind);
                // refused: 8-bit standard sums for large n, exponential rings beyond 2 workers
                if cfg.width_for(n).is_err() {
                    continue;
                }
                let out = gqsgd_mean(&shards, &cfg, CounterRng::new(1), 0).unwrap();
                let q = &out.traffic;
                cases += 1;
                kinds.insert(format!("{kind:?}"));
                ok &= 4 * q.bytes_sent_total == base.bytes_sent_total
                    && q.bytes_per_worker.iter().zip(&base.bytes_per_worker).all(|(a, b)| 4 * a == *b)
                    && q.steps == base.steps
                    && q.messages == base.messages;
            }
        }
    }
    outcome(
        ok && kinds.len() == 2,
        format!("{cases} topology/scheme/n cases at exactly 1/4 of the f32 payload ({kinds:?})"),
    )
}

fn c9() -> Outcome {
    let (n, d, s) = (8usize, 256usize, 7u32);
    let cfg = GqsgdConfig::exponential(s).unwrap();
    let theta = theta_hat(&cfg.scheme, n, d).unwrap();
    let budget = (1.0 + theta * n as f64) * (1.0 + ITERATION_MARGIN);
    let mut ratios = Vec::new();
    for seed in 0..CONVERGENCE_SEEDS {
        let task = Task::quadratic(n, d, 128, 0.1, seed).unwrap();
        let lr = 1.0 / (2.0 * task.l_smooth * (1.0 + theta * n as f64));
        let iterations = |compression: Option<GqsgdConfig>, target: f64, cap: usize| {
            let tc = TrainConfig {
                steps: cap,
                lr: Some(lr),
                batch: None,
                seed,
                compression,
                topology: TopologyKind::BinaryTree,
            };
            let mut st = TrainState::new(n, vec![0.0; d]);
            for k in 0..cap {
                if task.suboptimality(st.x()).unwrap() <= target {
                    return Some(k);
                }
                sgd_step(&mut st, &task, &tc).unwrap();
            }
            None
        };
        let target = TARGET_REDUCTION * task.suboptimality(&vec![0.0; d]).unwrap();
        let kb = iterations(None, target, 100_000).expect("baseline converges");
        let kc = iterations(Some(cfg.clone()), target, 20 * kb);
        ratios.push(kc.map_or(f64::INFINITY, |k| k as f64 / kb as f64));
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let shown: Vec<String> = ratios.iter().map(|r| format!("{r:.3}")).collect();
    outcome(
        mean <= budget,
        format!("mean iteration ratio {mean:.3} (per seed [{}]) vs budget {budget:.3}", shown.join(", ")),
    )
}

fn c10() -> Outcome {
    let cfg = GqsgdConfig::exponential(7).unwrap().with_width(Some(Width::W8));
    let sparse = cfg.clone().with_sparse(true);
    let (mut sum, mut var, mut sum_sparse) = (0.0, 0.0, 0.0);
    let traces = gradient_traces(8, 10);
    for (i, shards) in traces.iter().enumerate() {
        let e = empirical_compression_error(shards, &cfg, ERROR_TRIALS, i as u64).unwrap();
        sum += e.mean;
        var += e.se * e.se;
        sum_sparse += empirical_compression_error(shards, &sparse, ERROR_TRIALS, i as u64).unwrap().mean;
    }
    let k = traces.len() as f64;
    let (mean, se) = (sum / k, var.sqrt() / k);
    outcome(
        mean <= ERROR_BUDGET + Z * se,
        format!(
            "relative error {:.3}% (+/- {:.3}%) vs {:.1}%; single-shot (exact-sum) path {:.3}%",
            100.0 * mean,
            100.0 * Z * se,
            100.0 * ERROR_BUDGET,
            100.0 * sum_sparse / k
        ),
    )
}

fn c11() -> Outcome {
    let exp: Vec<u32> = (1..=64).filter(|&s| check_width(s, 16, 4, LevelKind::Exponential)).collect();
    let std_none = (1..=4096).all(|s| !check_width(s, 16, 4, LevelKind::Standard));
    outcome(
        exp == vec![1, 2, 3] && std_none,
        format!("exponential admits s in {exp:?}; standard admits none: {std_none}"),
    )
}

fn c12() -> Outcome {
    let mut mismatches = 0;
    for run in 0..TRANSPORT_RUNS {
        let rng = CounterRng::new(run);
        let n = 2 + (run % 7) as usize;
        let d = 8 + (run % 13) as usize * 5;
        let shards = gaussian_shards(n, d, 1000 + run);
        let mut cfg = match run % 3 {
            0 => GqsgdConfig::exponential(7).unwrap(),
            1 => GqsgdConfig::standard(15).unwrap(),
            _ => GqsgdConfig::exponential(5).unwrap().with_sparse(true),
        };
        if run % 2 == 1 && cfg.width_for(n).is_ok() {
            cfg = cfg.with_spec(NormSpec::L2);
            if cfg.clone().with_topology(TopologyKind::Ring).width_for(n).is_ok() {
                cfg = cfg.with_topology(TopologyKind::Ring);
            }
        }
        let go = |b: Backend| gqsgd_mean(&shards, &cfg.clone().with_backend(b), rng, run as u32);
        let (sim, thr, tcp) = (go(Backend::Sim), go(Backend::Threads), go(Backend::Tcp));
        let same = match (&sim, &thr, &tcp) {
            (Ok(a), Ok(b), Ok(c)) => a == b && a == c,
            (Err(a), Err(b), Err(c)) => a.to_string() == b.to_string() && a.to_string() == c.to_string(),
            _ => false,
        };
        if !same {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{TRANSPORT_RUNS} seeded runs, {mismatches} differing between sim, threads and tcp"),
    )
}

fn main() {
    let criteria: [(&str, &str, u64, fn() -> Outcome); 12] = [
        ("1", "exact reduce unbiasedness", 10, c1),
        ("2", "k distribution", 10, c2),
        ("3", "distributed-mean unbiasedness", 60, c3),
        ("4", "variance bound", 120, c4),
        ("5", "sparsity bound", 60, c5),
        ("6", "tree aggregation inflation", 60, c6),
        ("7", "performance model", 5, c7),
        ("8", "byte accounting", 5, c8),
        ("9", "end-to-end convergence", 120, c9),
        ("10", "relative compression error", 60, c10),
        ("11", "overflow admissibility", 1, c11),
        ("12", "transport equivalence", 60, c12),
    ];
    let mut failed = 0;
    for (id, name, limit, f) in criteria {
        let t0 = Instant::now();
        let o = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let took = t0.elapsed();
        let in_time = took <= Duration::from_secs(limit);
        let pass = o.pass && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "[{}] criterion {id:>2} {name}: {} ({:.1}s of {limit}s{})",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64(),
            if in_time { "" } else { ", over time limit" }
        );
    }
    println!("acceptance: {} passed, {failed} failed", 12 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
