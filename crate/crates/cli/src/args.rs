use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use gqsgd_core::perf_model::{DEFAULT_SIZE, OMEGA_EXPONENTIAL};
use gqsgd_core::trainer::default_s;
use gqsgd_core::{
    Backend, Error, GqsgdConfig, LevelKind, LevelScheme, NormSpec, TopologyKind, Width,
};

#[derive(Parser)]
#[command(name = "gqsgd", version, about = "Globally normalized gradient quantization over Allreduce")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Quantize worker shards against their global norm.
    Quantize(QuantizeArgs),
    /// Estimate the mean of worker shards with a quantized Allreduce.
    Allreduce(AllreduceArgs),
    /// Run distributed SGD on a synthetic task and write the trajectory.
    Train(TrainArgs),
    /// Evaluate the communication cost model.
    Perf(PerfArgs),
    /// Run the statistical verification suite.
    Verify(VerifyArgs),
    /// Measure quantization, reduction and collective throughput.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeArg {
    Standard,
    Exponential,
}

impl SchemeArg {
    pub fn kind(self) -> LevelKind {
        match self {
            SchemeArg::Standard => LevelKind::Standard,
            SchemeArg::Exponential => LevelKind::Exponential,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum NormArg {
    L2,
    Linf,
}

impl NormArg {
    pub fn spec(self) -> NormSpec {
        match self {
            NormArg::L2 => NormSpec::L2,
            NormArg::Linf => NormSpec::LINF,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NormArg::L2 => "l2",
            NormArg::Linf => "linf",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TopoArg {
    Tree,
    Ring,
}

impl From<TopoArg> for TopologyKind {
    fn from(t: TopoArg) -> Self {
        match t {
            TopoArg::Tree => TopologyKind::BinaryTree,
            TopoArg::Ring => TopologyKind::Ring,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportArg {
    /// Sequential in-process scheduler.
    Inproc,
    /// One thread per worker, in-memory queues.
    Threads,
    /// One thread per worker over loopback TCP, or one process per worker
    /// with --listen and --peers.
    Tcp,
}

impl From<TransportArg> for Backend {
    fn from(t: TransportArg) -> Self {
        match t {
            TransportArg::Inproc => Backend::Sim,
            TransportArg::Threads => Backend::Threads,
            TransportArg::Tcp => Backend::Tcp,
        }
    }
}

/// Quantizer and aggregation settings shared by several subcommands.
#[derive(Args, Clone, Debug, Serialize)]
pub struct SchemeArgs {
    /// Number of workers.
    #[arg(long, visible_alias = "n", default_value_t = 8)]
    pub workers: usize,
    #[arg(long, value_enum, default_value_t = SchemeArg::Exponential)]
    pub scheme: SchemeArg,
    /// Levels: 255 (standard) or 7 (exponential) by default.
    #[arg(long)]
    pub s: Option<u32>,
    #[arg(long, value_enum, default_value_t = NormArg::Linf)]
    pub norm: NormArg,
    /// Allgather the non-zero coefficients instead of a dense Allreduce.
    #[arg(long)]
    pub sparse: bool,
    /// Wire integer width in bits (8, 16 or 32); the smallest admissible by default.
    #[arg(long)]
    pub width: Option<u32>,
    #[arg(long, value_enum, default_value_t = TopoArg::Tree)]
    pub topo: TopoArg,
}

impl SchemeArgs {
    pub fn s(&self) -> u32 {
        self.s.unwrap_or(default_s(self.scheme.kind()))
    }

    pub fn width(&self) -> Result<Option<Width>, Error> {
        self.width.map(Width::from_bits).transpose()
    }

    pub fn scheme(&self) -> Result<LevelScheme, Error> {
        LevelScheme::build(self.scheme.kind(), self.s())
    }

    pub fn config(&self, backend: Backend) -> Result<GqsgdConfig, Error> {
        if self.workers == 0 {
            return Err(Error::InvalidArgument("--workers must be at least 1".into()));
        }
        Ok(GqsgdConfig::new(self.scheme()?)
            .with_spec(self.norm.spec())
            .with_sparse(self.sparse)
            .with_width(self.width()?)
            .with_topology(self.topo.into())
            .with_backend(backend))
    }
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct NetArgs {
    #[arg(long, value_enum, default_value_t = TransportArg::Inproc)]
    pub transport: TransportArg,
    /// This process's listen address; runs a single worker of a multi-process job.
    #[arg(long, requires = "peers")]
    pub listen: Option<SocketAddr>,
    /// Listen addresses of all workers in rank order.
    #[arg(long, value_delimiter = ',', requires = "listen")]
    pub peers: Vec<SocketAddr>,
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct DataArgs {
    /// Elements per worker when shards are generated.
    #[arg(long, default_value_t = 1024)]
    pub d: usize,
    /// CSV file with one row of comma-separated values per worker.
    #[arg(long)]
    pub input: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct QuantizeArgs {
    #[command(flatten)]
    pub scheme: SchemeArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV of quantized coefficients.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct AllreduceArgs {
    #[command(flatten)]
    pub scheme: SchemeArgs,
    #[command(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Also estimate the relative compression error over this many trials.
    #[arg(long, default_value_t = 0)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV of the exact and estimated mean.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskArg {
    Quadratic,
    Logistic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainSchemeArg {
    /// Uncompressed f32 baseline.
    None,
    Standard,
    Exponential,
}

/// Every flag overrides the matching key of `--config` (or the default).
#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// TOML experiment description.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    #[arg(long, visible_alias = "n")]
    pub workers: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    /// Samples per worker.
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Minibatch size per worker; full batch when absent.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, value_enum)]
    pub scheme: Option<TrainSchemeArg>,
    #[arg(long)]
    pub s: Option<u32>,
    #[arg(long, value_enum)]
    pub norm: Option<NormArg>,
    #[arg(long)]
    pub sparse: bool,
    #[arg(long)]
    pub width: Option<u32>,
    #[arg(long, value_enum)]
    pub topo: Option<TopoArg>,
    #[arg(long, value_enum)]
    pub transport: Option<TransportArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Trajectory CSV; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct PerfArgs {
    /// Propagation delay, seconds.
    #[arg(long, default_value_t = 0.0)]
    pub alpha: f64,
    /// Bandwidth, bytes/s.
    #[arg(long, default_value_t = 5.4e9)]
    pub beta: f64,
    /// Native reduction speed, bytes/s.
    #[arg(long, default_value_t = 2e12)]
    pub gamma: f64,
    /// Quantized over native reduction speed.
    #[arg(long, default_value_t = OMEGA_EXPONENTIAL)]
    pub omega: f64,
    /// Compression ratio.
    #[arg(long, default_value_t = 4.0)]
    pub rho: f64,
    /// Gradient size, bytes.
    #[arg(long, default_value_t = DEFAULT_SIZE)]
    pub size: f64,
    #[arg(long, default_value_t = 16)]
    pub workers: usize,
    /// Quantize plus dequantize time per byte.
    #[arg(long, default_value_t = 0.0)]
    pub delta: f64,
    /// JSON prediction.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct VerifyArgs {
    /// Full trial counts; a quick pass otherwise.
    #[arg(long)]
    pub all: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV of the check table.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct BenchArgs {
    #[command(flatten)]
    pub scheme: SchemeArgs,
    #[arg(long, value_enum, default_value_t = TransportArg::Inproc)]
    pub transport: TransportArg,
    /// Gradient size in bytes of f32 data.
    #[arg(long, default_value_t = DEFAULT_SIZE as usize)]
    pub size: usize,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Text report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
