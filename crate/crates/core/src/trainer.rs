//! Data-parallel SGD on synthetic tasks, with exact or compressed gradient
//! averaging.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::algorithm::{exact_mean, gqsgd_mean, monte_carlo, GqsgdConfig};
use crate::collectives::{Backend, Topology, TopologyKind, TrafficReport};
use crate::error::{Error, Result};
use crate::quantizer::{LevelKind, LevelScheme, NormSpec};
use crate::rng::{domain, CounterRng};
use crate::verify::BoundCheck;
use crate::wire::Width;

/// Iterates whose norm exceeds this are treated as diverged.
pub const DIVERGENCE_NORM: f64 = 1e8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Quadratic,
    Logistic,
}

/// One worker's local data: rows of `a` with targets `b` (labels in
/// `{-1, +1}` for the logistic task).
#[derive(Clone, Debug)]
pub struct WorkerData {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl WorkerData {
    pub fn rows(&self) -> usize {
        self.a.nrows()
    }
}

#[derive(Clone, Debug)]
pub struct Task {
    pub kind: TaskKind,
    pub d: usize,
    pub workers: Vec<WorkerData>,
    /// l2 regularization of the logistic loss.
    pub lambda: f64,
    /// Smoothness and strong-convexity constants of the global objective.
    pub l_smooth: f64,
    pub mu: f64,
    /// Known only for the quadratic task.
    pub x_star: Option<Vec<f64>>,
    pub f_star: Option<f64>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal) * scale)
}

fn data_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(CounterRng::new(seed).fork(domain::DATA).key())
}

fn mean_gram(workers: &[WorkerData], d: usize) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(d, d);
    for w in workers {
        h += w.a.tr_mul(&w.a) / w.rows() as f64;
    }
    h / workers.len() as f64
}

fn extreme_eigenvalues(h: DMatrix<f64>) -> (f64, f64) {
    let ev = h.symmetric_eigenvalues();
    (ev.min(), ev.max())
}

impl Task {
    /// `f_i(x) = ||A_i x - b_i||^2 / (2 m)` with `b_i = A_i x0 + noise * eps`.
    /// Each worker's planted point is shifted so local optima differ.
    pub fn quadratic(n: usize, d: usize, rows: usize, noise: f64, seed: u64) -> Result<Self> {
        if n == 0 || d == 0 || rows == 0 {
            return Err(Error::invalid_arg("n, d and rows must be positive"));
        }
        let mut rng = data_rng(seed);
        let x0 = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let workers: Vec<WorkerData> = (0..n)
            .map(|_| {
                let a = gaussian_matrix(&mut rng, rows, d, 1.0);
                let shift = DVector::from_fn(d, |_, _| 0.3 * rng.sample::<f64, _>(StandardNormal));
                let eps = DVector::from_fn(rows, |_, _| rng.sample::<f64, _>(StandardNormal));
                let b = &a * (&x0 + shift) + eps * noise;
                WorkerData { a, b }
            })
            .collect();
        let h = mean_gram(&workers, d);
        let mut rhs = DVector::zeros(d);
        for w in &workers {
            rhs += w.a.tr_mul(&w.b) / w.rows() as f64;
        }
        rhs /= n as f64;
        let x_star = h
            .clone()
            .cholesky()
            .ok_or_else(|| Error::invalid_arg("normal equations are singular; add rows"))?
            .solve(&rhs);
        let (mu, l_smooth) = extreme_eigenvalues(h);
        let mut task = Self {
            kind: TaskKind::Quadratic,
            d,
            workers,
            lambda: 0.0,
            l_smooth,
            mu,
            x_star: Some(x_star.as_slice().to_vec()),
            f_star: None,
        };
        task.f_star = Some(task.loss(x_star.as_slice()));
        Ok(task)
    }

    /// Regularized logistic regression on labels from a noisy planted model.
    pub fn logistic(n: usize, d: usize, rows: usize, noise: f64, seed: u64) -> Result<Self> {
        if n == 0 || d == 0 || rows == 0 {
            return Err(Error::invalid_arg("n, d and rows must be positive"));
        }
        let lambda = 1e-3;
        let mut rng = data_rng(seed);
        let w0 = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let workers: Vec<WorkerData> = (0..n)
            .map(|_| {
                let a = gaussian_matrix(&mut rng, rows, d, 1.0 / (d as f64).sqrt());
                let margin = &a * &w0;
                let b = DVector::from_fn(rows, |i, _| {
                    let z = margin[i] + noise * rng.sample::<f64, _>(StandardNormal);
                    if z >= 0.0 {
                        1.0
                    } else {
                        -1.0
                    }
                });
                WorkerData { a, b }
            })
            .collect();
        let (_, top) = extreme_eigenvalues(mean_gram(&workers, d));
        Ok(Self {
            kind: TaskKind::Logistic,
            d,
            workers,
            lambda,
            l_smooth: top / 4.0 + lambda,
            mu: lambda,
            x_star: None,
            f_star: None,
        })
    }

    pub fn n(&self) -> usize {
        self.workers.len()
    }

    pub fn local_loss(&self, i: usize, x: &[f64]) -> f64 {
        let w = &self.workers[i];
        let x = DVector::from_column_slice(x);
        let m = w.rows() as f64;
        match self.kind {
            TaskKind::Quadratic => (&w.a * &x - &w.b).norm_squared() / (2.0 * m),
            TaskKind::Logistic => {
                let z = &w.a * &x;
                let s: f64 = z.iter().zip(w.b.iter()).map(|(z, y)| softplus(-y * z)).sum();
                s / m + 0.5 * self.lambda * x.norm_squared()
            }
        }
    }

    pub fn loss(&self, x: &[f64]) -> f64 {
        (0..self.n()).map(|i| self.local_loss(i, x)).sum::<f64>() / self.n() as f64
    }

    /// `f(x) - f*` when the optimum is known.
    pub fn suboptimality(&self, x: &[f64]) -> Option<f64> {
        self.f_star.map(|f| self.loss(x) - f)
    }

    /// Gradient of `f_i` over the given rows (all rows when `None`).
    pub fn local_grad(&self, i: usize, x: &[f64], rows: Option<&[usize]>) -> Vec<f64> {
        let w = &self.workers[i];
        let x = DVector::from_column_slice(x);
        let (a, b) = match rows {
            None => (w.a.clone(), w.b.clone()),
            Some(r) => (w.a.select_rows(r), w.b.select_rows(r)),
        };
        let m = a.nrows() as f64;
        let g = match self.kind {
            TaskKind::Quadratic => a.tr_mul(&(&a * &x - &b)) / m,
            TaskKind::Logistic => {
                let z = &a * &x;
                let coef = DVector::from_fn(z.len(), |k, _| -b[k] * sigmoid(-b[k] * z[k]));
                a.tr_mul(&coef) / m + &x * self.lambda
            }
        };
        g.as_slice().to_vec()
    }

    /// Expected squared deviation of a with-replacement minibatch gradient
    /// of size `batch` from the full local gradient.
    pub fn minibatch_noise(&self, i: usize, x: &[f64], batch: usize) -> f64 {
        let w = &self.workers[i];
        let full = DVector::from_vec(self.local_grad(i, x, None));
        let m = w.rows();
        let per_row: f64 = (0..m)
            .map(|r| (DVector::from_vec(self.local_grad(i, x, Some(&[r]))) - &full).norm_squared())
            .sum::<f64>()
            / m as f64;
        per_row / batch as f64
    }
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Variance parameter for a single-shot quantizer of `n`
/// shards of length `d`; `None` for custom grids.
pub fn theta_hat(scheme: &LevelScheme, n: usize, d: usize) -> Option<f64> {
    let (n, d, s) = (n as f64, d as f64, f64::from(scheme.s()));
    match scheme.kind() {
        LevelKind::Standard => Some(d.sqrt() / (n.sqrt() * s)),
        LevelKind::Exponential => Some(1.0 / (8.0 * n) + d.sqrt() / (n.sqrt() * (s - 1.0).exp2())),
        LevelKind::Custom => None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// Constant stepsize; `1 / (2 L (1 + theta n))` when `None`.
    pub lr: Option<f64>,
    /// Rows per worker per step, sampled with replacement; full batch when `None`.
    pub batch: Option<usize>,
    pub seed: u64,
    pub compression: Option<GqsgdConfig>,
    /// Topology used for traffic accounting of the uncompressed baseline.
    pub topology: TopologyKind,
}

impl TrainConfig {
    pub fn stepsize(&self, task: &Task) -> f64 {
        self.lr.unwrap_or_else(|| {
            let theta = self
                .compression
                .as_ref()
                .and_then(|c| theta_hat(&c.scheme, task.n(), task.d))
                .unwrap_or(0.0);
            1.0 / (2.0 * task.l_smooth * (1.0 + theta * task.n() as f64))
        })
    }
}

/// Per-worker iterates; they stay bit-identical because every worker applies
/// the same collective result.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub iterates: Vec<Vec<f64>>,
    pub step: usize,
}

impl TrainState {
    pub fn new(n: usize, x0: Vec<f64>) -> Self {
        Self {
            iterates: vec![x0; n],
            step: 0,
        }
    }

    pub fn x(&self) -> &[f64] {
        &self.iterates[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepInfo {
    /// Payload bytes of this step's gradient exchange.
    pub bytes: u64,
    /// `||g_hat - grad f(x)||^2` for this step's estimate.
    pub grad_var: f64,
    pub traffic: TrafficReport,
}

fn minibatch(task: &Task, i: usize, batch: Option<usize>, seed: u64, step: usize) -> Option<Vec<usize>> {
    batch.map(|b| {
        let mut c = CounterRng::new(seed)
            .fork(domain::MINIBATCH)
            .fork(step as u64)
            .fork(i as u64)
            .cursor();
        (0..b).map(|_| c.below(task.workers[i].rows())).collect()
    })
}

/// One synchronous data-parallel step `x <- x - lr * mean_i g_i`.
pub fn sgd_step(state: &mut TrainState, task: &Task, cfg: &TrainConfig) -> Result<StepInfo> {
    let n = task.n();
    let lr = cfg.stepsize(task);
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::invalid_arg(format!("stepsize must be positive, got {lr}")));
    }
    let k = state.step;
    let grads: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let rows = minibatch(task, i, cfg.batch, cfg.seed, k);
            task.local_grad(i, &state.iterates[i], rows.as_deref())
        })
        .collect();
    let (means, traffic) = match &cfg.compression {
        None => {
            let m = exact_mean(&grads)?;
            let topo = Topology::new(n, cfg.topology)?;
            (vec![m; n], topo.traffic(task.d, 4))
        }
        Some(c) => {
            let out = gqsgd_mean(&grads, c, CounterRng::new(cfg.seed), k as u32)?;
            (out.outputs, out.traffic)
        }
    };
    let full: Vec<Vec<f64>> = (0..n).map(|i| task.local_grad(i, state.x(), None)).collect();
    let truth = exact_mean(&full)?;
    let grad_var = means[0].iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).sum();
    for (x, g) in state.iterates.iter_mut().zip(&means) {
        x.iter_mut().zip(g).for_each(|(xj, gj)| *xj -= lr * gj);
    }
    state.step += 1;
    let norm = state.x().iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm <= DIVERGENCE_NORM) {
        return Err(Error::Diverged { step: k, norm });
    }
    Ok(StepInfo {
        bytes: traffic.bytes_sent_total,
        grad_var,
        traffic,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub loss: f64,
    /// Cumulative payload bytes.
    pub bytes: u64,
    pub grad_var: f64,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    /// Row `k` holds the loss at iterate `k`; `grad_var` is that of the step
    /// leaving it (0 for the final row).
    pub rows: Vec<TrajectoryRow>,
    pub traffic: TrafficReport,
    pub final_x: Vec<f64>,
    pub wall_seconds: f64,
}

impl Trajectory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,bytes,grad_var\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:e},{},{:e}\n", r.step, r.loss, r.bytes, r.grad_var));
        }
        s
    }
}

/// Run `cfg.steps` steps from the origin.
pub fn run_experiment(task: &Task, cfg: &TrainConfig) -> Result<Trajectory> {
    let start = Instant::now();
    let mut state = TrainState::new(task.n(), vec![0.0; task.d]);
    let mut traffic = TrafficReport::new(task.n());
    let mut rows = Vec::with_capacity(cfg.steps + 1);
    for k in 0..cfg.steps {
        let loss = task.loss(state.x());
        let info = sgd_step(&mut state, task, cfg)?;
        traffic.absorb(&info.traffic);
        rows.push(TrajectoryRow {
            step: k,
            loss,
            bytes: traffic.bytes_sent_total - info.bytes,
            grad_var: info.grad_var,
        });
    }
    rows.push(TrajectoryRow {
        step: cfg.steps,
        loss: task.loss(state.x()),
        bytes: traffic.bytes_sent_total,
        grad_var: 0.0,
    });
    Ok(Trajectory {
        rows,
        traffic,
        final_x: state.x().to_vec(),
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Monte-Carlo check, at a frozen iterate, that the estimator's variance obeys
/// `theta (1/n) sum ||grad f_i||^2 + (theta + 1/n) (1/n) sum E||g_i - grad f_i||^2`.
pub fn variance_decomposition_check(
    task: &Task,
    x: &[f64],
    cfg: &GqsgdConfig,
    batch: usize,
    trials: usize,
    seed: u64,
) -> Result<BoundCheck> {
    let n = task.n();
    let theta = theta_hat(&cfg.scheme, n, task.d)
        .ok_or_else(|| Error::invalid_arg("no variance bound for custom grids"))?;
    let full: Vec<Vec<f64>> = (0..n).map(|i| task.local_grad(i, x, None)).collect();
    let truth = exact_mean(&full)?;
    let signal = full.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / n as f64;
    let noise = (0..n).map(|i| task.minibatch_noise(i, x, batch)).sum::<f64>() / n as f64;
    let bound = theta * signal + (theta + 1.0 / n as f64) * noise;
    let root = CounterRng::new(seed).fork(domain::TRIAL);
    let (mean, se) = monte_carlo(trials, |t| {
        let grads: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let rows = minibatch(task, i, Some(batch), root.fork(t).key(), 0);
                task.local_grad(i, x, rows.as_deref())
            })
            .collect();
        let out = gqsgd_mean(&grads, cfg, root.fork(t), 0)?;
        Ok(out.mean().iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).sum())
    })?;
    Ok(BoundCheck::upper("variance decomposition", mean, bound, trials, 4.0 * se))
}

/// Flat key-value experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub n: usize,
    pub d: usize,
    /// Samples per worker.
    pub rows: usize,
    pub noise: f64,
    pub steps: usize,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub seed: u64,
    /// `none`, `standard` or `exponential`.
    pub scheme: String,
    pub s: Option<u32>,
    /// `l2` or `linf`.
    pub norm: String,
    pub sparse: bool,
    pub width: Option<u32>,
    /// `tree` or `ring`.
    pub topo: TopologyKind,
    pub backend: Backend,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Quadratic,
            n: 8,
            d: 256,
            rows: 128,
            noise: 0.1,
            steps: 200,
            lr: None,
            batch: None,
            seed: 0,
            scheme: "exponential".into(),
            s: None,
            norm: "linf".into(),
            sparse: false,
            width: None,
            topo: TopologyKind::BinaryTree,
            backend: Backend::Sim,
        }
    }
}

pub fn parse_norm(s: &str) -> Result<NormSpec> {
    match s {
        "l2" => Ok(NormSpec::L2),
        "linf" => Ok(NormSpec::LINF),
        _ => Err(Error::Config(format!("unknown norm {s:?}; use l2 or linf"))),
    }
}

/// Default level count for 8-bit payloads.
pub fn default_s(kind: LevelKind) -> u32 {
    match kind {
        LevelKind::Exponential => 7,
        _ => 255,
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn compression(&self) -> Result<Option<GqsgdConfig>> {
        let kind = match self.scheme.as_str() {
            "none" => return Ok(None),
            "standard" => LevelKind::Standard,
            "exponential" => LevelKind::Exponential,
            other => return Err(Error::Config(format!("unknown scheme {other:?}"))),
        };
        let s = self.s.unwrap_or(default_s(kind));
        let width = self.width.map(Width::from_bits).transpose()?;
        Ok(Some(
            GqsgdConfig::new(LevelScheme::build(kind, s)?)
                .with_spec(parse_norm(&self.norm)?)
                .with_sparse(self.sparse)
                .with_width(width)
                .with_topology(self.topo)
                .with_backend(self.backend),
        ))
    }

    pub fn build_task(&self) -> Result<Task> {
        match self.task {
            TaskKind::Quadratic => Task::quadratic(self.n, self.d, self.rows, self.noise, self.seed),
            TaskKind::Logistic => Task::logistic(self.n, self.d, self.rows, self.noise, self.seed),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            steps: self.steps,
            lr: self.lr,
            batch: self.batch,
            seed: self.seed,
            compression: self.compression()?,
            topology: self.topo,
        })
    }
}
