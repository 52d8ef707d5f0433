//! Global-norm stochastic gradient quantization with aggregation that is
//! compatible with Allreduce.

pub mod algorithm;
pub mod collectives;
pub mod error;
pub mod exp_arith;
pub mod perf_model;
pub mod quantizer;
pub mod rng;
pub mod trainer;
pub mod verify;
pub mod wire;

pub use algorithm::{gqsgd_mean, GqsgdConfig, GqsgdOutput};
pub use collectives::{Backend, Topology, TopologyKind, TrafficReport};
pub use error::{Error, Result};
pub use exp_arith::{ExpToken, ReduceContext};
pub use perf_model::{CostParams, Threshold};
pub use quantizer::{LevelKind, LevelScheme, NormOrder, NormSpec, QuantizedShard, SparsePayload};
pub use rng::CounterRng;
pub use trainer::{Task, TaskKind, TrainConfig};
pub use verify::BoundCheck;
pub use wire::Width;
