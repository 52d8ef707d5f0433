//! Allreduce and Allgather over a simulated or socket-backed cluster.

mod frame;
mod program;
mod sim;
mod tcp;
mod topology;
mod transport;

use std::fmt::Debug;

use serde::{Deserialize, Serialize};

pub use frame::{read_frame, write_frame, Frame, MsgType, HEADER_LEN, MAGIC};
pub use program::{allgather_worker, allreduce_worker, norm_allreduce_worker, WorkerTraffic};
pub use sim::{simulate_allgather, simulate_allreduce};
pub use tcp::TcpTransport;
pub use topology::{chunk_range, Event, EventOp, Topology, TopologyKind};
pub use transport::{run_cluster, Backend, ChannelTransport, Transport, DEFAULT_TIMEOUT};

use crate::error::{Error, Result};
use crate::exp_arith::{decode_tokens, encode_tokens, ExpToken};
use crate::quantizer::{NormOrder, NormSpec};
use crate::wire::{get_int, put_int, Width};

/// Element type carried by an Allreduce.
pub trait Lane: Copy + Send + Sync + Debug + 'static {
    const MSG: MsgType;

    fn wire_bytes(count: usize, w: Width) -> usize;
    fn encode(xs: &[Self], w: Width, out: &mut Vec<u8>) -> Result<()>;
    fn decode(bytes: &[u8], w: Width) -> Result<Vec<Self>>;
}

/// Signed integer accumulators, `w` bits each on the wire.
impl Lane for i32 {
    const MSG: MsgType = MsgType::Dense;

    fn wire_bytes(count: usize, w: Width) -> usize {
        count * w.bytes()
    }

    fn encode(xs: &[Self], w: Width, out: &mut Vec<u8>) -> Result<()> {
        out.reserve(xs.len() * w.bytes());
        xs.iter().try_for_each(|&x| put_int(out, i64::from(x), w))
    }

    fn decode(bytes: &[u8], w: Width) -> Result<Vec<Self>> {
        if bytes.len() % w.bytes() != 0 {
            return Err(Error::corrupt("integer buffer is not a whole number of lanes"));
        }
        Ok(bytes.chunks_exact(w.bytes()).map(|c| get_int(c, w) as i32).collect())
    }
}

impl Lane for ExpToken {
    const MSG: MsgType = MsgType::Exp;

    fn wire_bytes(count: usize, w: Width) -> usize {
        count * w.bytes()
    }

    fn encode(xs: &[Self], w: Width, out: &mut Vec<u8>) -> Result<()> {
        encode_tokens(xs, w, out)
    }

    fn decode(bytes: &[u8], w: Width) -> Result<Vec<Self>> {
        decode_tokens(bytes, w)
    }
}

/// Uncompressed 32-bit floats; the width is ignored.
impl Lane for f32 {
    const MSG: MsgType = MsgType::Dense;

    fn wire_bytes(count: usize, _: Width) -> usize {
        count * 4
    }

    fn encode(xs: &[Self], _: Width, out: &mut Vec<u8>) -> Result<()> {
        out.reserve(xs.len() * 4);
        xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        Ok(())
    }

    fn decode(bytes: &[u8], _: Width) -> Result<Vec<Self>> {
        if bytes.len() % 4 != 0 {
            return Err(Error::corrupt("f32 buffer length not a multiple of 4"));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Norm statistics.
impl Lane for f64 {
    const MSG: MsgType = MsgType::Norm;

    fn wire_bytes(count: usize, _: Width) -> usize {
        count * 8
    }

    fn encode(xs: &[Self], _: Width, out: &mut Vec<u8>) -> Result<()> {
        out.reserve(xs.len() * 8);
        xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        Ok(())
    }

    fn decode(bytes: &[u8], _: Width) -> Result<Vec<Self>> {
        if bytes.len() % 8 != 0 {
            return Err(Error::corrupt("f64 buffer length not a multiple of 8"));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Where a reduce happens: `dst` folds in the `src` slice starting at
/// element `offset` of the full buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReduceSite {
    pub step: u32,
    pub src: usize,
    pub dst: usize,
    pub offset: usize,
}

pub type ReduceFn<'a, T> = dyn Fn(&mut [T], &[T], ReduceSite) -> Result<()> + Sync + 'a;

/// Exact integer addition that refuses to leave the `w`-bit signed range.
pub fn int_sum(w: Width) -> impl Fn(&mut [i32], &[i32], ReduceSite) -> Result<()> + Sync {
    let (lo, hi) = w.signed_range();
    move |acc, other, site| {
        for (a, &b) in acc.iter_mut().zip(other) {
            let v = i64::from(*a) + i64::from(b);
            if v < lo || v > hi {
                return Err(Error::OverflowDetected(format!(
                    "partial sum {v} at step {} leaves the {}-bit range",
                    site.step,
                    w.bits()
                )));
            }
            *a = v as i32;
        }
        Ok(())
    }
}

pub fn f32_sum(acc: &mut [f32], other: &[f32], _: ReduceSite) -> Result<()> {
    acc.iter_mut().zip(other).for_each(|(a, b)| *a += b);
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficReport {
    /// Payload bytes only; frame headers are counted in `header_bytes`.
    pub bytes_sent_total: u64,
    pub bytes_per_worker: Vec<u64>,
    pub steps: u32,
    pub reduce_invocations: u64,
    pub messages: u64,
    pub header_bytes: u64,
}

impl TrafficReport {
    pub fn new(n: usize) -> Self {
        Self {
            bytes_per_worker: vec![0; n],
            ..Self::default()
        }
    }

    pub(crate) fn record(&mut self, src: usize, bytes: usize) {
        self.bytes_sent_total += bytes as u64;
        self.bytes_per_worker[src] += bytes as u64;
        self.messages += 1;
        self.header_bytes += HEADER_LEN as u64;
    }

    pub fn from_workers(steps: u32, workers: &[WorkerTraffic]) -> Self {
        let mut r = Self::new(workers.len());
        r.steps = steps;
        for (i, w) in workers.iter().enumerate() {
            r.bytes_per_worker[i] = w.bytes_sent;
            r.bytes_sent_total += w.bytes_sent;
            r.messages += w.messages;
            r.reduce_invocations += w.reduces;
        }
        r.header_bytes = r.messages * HEADER_LEN as u64;
        r
    }

    /// Accumulate another operation's traffic (steps add up).
    pub fn absorb(&mut self, other: &TrafficReport) {
        if self.bytes_per_worker.len() < other.bytes_per_worker.len() {
            self.bytes_per_worker.resize(other.bytes_per_worker.len(), 0);
        }
        for (a, b) in self.bytes_per_worker.iter_mut().zip(&other.bytes_per_worker) {
            *a += b;
        }
        self.bytes_sent_total += other.bytes_sent_total;
        self.steps += other.steps;
        self.reduce_invocations += other.reduce_invocations;
        self.messages += other.messages;
        self.header_bytes += other.header_bytes;
    }
}

fn check_shapes<T>(bufs: &[Vec<T>], n: usize) -> Result<usize> {
    if bufs.len() != n {
        return Err(Error::invalid_arg(format!(
            "{} payloads for a topology of {n} workers",
            bufs.len()
        )));
    }
    let d = bufs[0].len();
    if let Some(i) = bufs.iter().position(|b| b.len() != d) {
        return Err(Error::invalid_arg(format!(
            "payload {i} has {} elements, expected {d}",
            bufs[i].len()
        )));
    }
    Ok(d)
}

/// Allreduce over any topology and backend; every worker ends with the same buffer.
pub fn allreduce<T: Lane>(
    backend: Backend,
    topo: &Topology,
    bufs: Vec<Vec<T>>,
    w: Width,
    round: u32,
    reduce: &ReduceFn<'_, T>,
) -> Result<(Vec<Vec<T>>, TrafficReport)> {
    check_shapes(&bufs, topo.n())?;
    if backend == Backend::Sim {
        return simulate_allreduce(topo, bufs, w, reduce);
    }
    let slots: Vec<std::sync::Mutex<Option<Vec<T>>>> =
        bufs.into_iter().map(|b| std::sync::Mutex::new(Some(b))).collect();
    let out = run_cluster(backend, topo.n(), |t| {
        let mut buf = slots[t.rank()].lock().unwrap().take().unwrap();
        let traffic = allreduce_worker(t, topo, &mut buf, w, round, reduce)?;
        Ok((buf, traffic))
    })?;
    let (bufs, traffic): (Vec<_>, Vec<_>) = out.into_iter().unzip();
    Ok((bufs, TrafficReport::from_workers(topo.steps(), &traffic)))
}

pub fn tree_allreduce<T: Lane>(
    backend: Backend,
    topo: &Topology,
    bufs: Vec<Vec<T>>,
    w: Width,
    round: u32,
    reduce: &ReduceFn<'_, T>,
) -> Result<(Vec<Vec<T>>, TrafficReport)> {
    if topo.kind() != TopologyKind::BinaryTree {
        return Err(Error::invalid_arg("tree_allreduce needs a tree topology"));
    }
    allreduce(backend, topo, bufs, w, round, reduce)
}

pub fn ring_allreduce<T: Lane>(
    backend: Backend,
    topo: &Topology,
    bufs: Vec<Vec<T>>,
    w: Width,
    round: u32,
    reduce: &ReduceFn<'_, T>,
) -> Result<(Vec<Vec<T>>, TrafficReport)> {
    if topo.kind() != TopologyKind::Ring {
        return Err(Error::invalid_arg("ring_allreduce needs a ring topology"));
    }
    allreduce(backend, topo, bufs, w, round, reduce)
}

/// Naive all-to-all gather of opaque blobs; every worker ends with all
/// blobs in worker order.
pub fn allgather(
    backend: Backend,
    blobs: Vec<Vec<u8>>,
    round: u32,
) -> Result<(Vec<Vec<Vec<u8>>>, TrafficReport)> {
    let n = blobs.len();
    if n == 0 {
        return Err(Error::invalid_arg("allgather needs at least one worker"));
    }
    if backend == Backend::Sim {
        return Ok(simulate_allgather(blobs));
    }
    let out = run_cluster(backend, n, |t| {
        let own = &blobs[t.rank()];
        allgather_worker(t, own, round)
    })?;
    let (gathered, traffic): (Vec<_>, Vec<_>) = out.into_iter().unzip();
    Ok((gathered, TrafficReport::from_workers(u32::from(n > 1), &traffic)))
}

pub(crate) fn norm_reduce(spec: NormSpec) -> impl Fn(&mut [f64], &[f64], ReduceSite) -> Result<()> + Sync {
    move |acc, other, _| {
        for (a, &b) in acc.iter_mut().zip(other) {
            *a = match spec.p {
                NormOrder::Two => *a + b,
                NormOrder::Inf => a.max(b),
            };
        }
        Ok(())
    }
}

pub(crate) fn norm_finish(v: f64, spec: NormSpec) -> f64 {
    match spec.p {
        NormOrder::Two => v.sqrt(),
        NormOrder::Inf => v,
    }
}

/// Allreduce of per-worker norm statistics into the global norm.
pub fn norm_allreduce(
    backend: Backend,
    stats: &[f64],
    spec: NormSpec,
    topo: &Topology,
    round: u32,
) -> Result<(Vec<f64>, TrafficReport)> {
    if let Some(bad) = stats.iter().find(|s| !s.is_finite() || **s < 0.0) {
        return Err(Error::invalid_input(format!("norm statistic {bad} is not a finite non-negative number")));
    }
    let bufs = stats.iter().map(|&s| vec![s]).collect();
    let reduce = norm_reduce(spec);
    let (out, traffic) = allreduce(backend, topo, bufs, Width::W32, round, &reduce)?;
    Ok((out.into_iter().map(|v| norm_finish(v[0], spec)).collect(), traffic))
}
