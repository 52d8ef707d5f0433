//! Per-worker halves of the collectives, run against a [`Transport`].

use super::{
    norm_finish, norm_reduce, EventOp, Frame, Lane, MsgType, ReduceFn, ReduceSite, Topology,
    Transport,
};
use crate::error::{Error, Result};
use crate::quantizer::NormSpec;
use crate::wire::Width;

/// What one worker contributed to a collective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WorkerTraffic {
    pub bytes_sent: u64,
    pub messages: u64,
    pub reduces: u64,
}

/// Run this worker's share of `topo`'s schedule on `buf`.
pub fn allreduce_worker<T: Lane>(
    t: &mut dyn Transport,
    topo: &Topology,
    buf: &mut [T],
    w: Width,
    round: u32,
    reduce: &ReduceFn<'_, T>,
) -> Result<WorkerTraffic> {
    let me = t.rank();
    if t.world() != topo.n() {
        return Err(Error::invalid_arg(format!(
            "transport has {} workers, topology {}",
            t.world(),
            topo.n()
        )));
    }
    let d = buf.len();
    let mut traffic = WorkerTraffic::default();
    for step in topo.schedule().chunk_by(|a, b| a.step == b.step) {
        for e in step.iter().filter(|e| e.src == me) {
            let mut payload = Vec::new();
            T::encode(&buf[topo.range(e, d)], w, &mut payload)?;
            traffic.bytes_sent += payload.len() as u64;
            traffic.messages += 1;
            t.send(e.dst, Frame::new(T::MSG, round, payload))?;
        }
        for e in step.iter().filter(|e| e.dst == me) {
            let frame = t.recv(e.src)?;
            frame.expect(T::MSG, round)?;
            let range = topo.range(e, d);
            let msg = T::decode(&frame.payload, w)?;
            if msg.len() != range.len() {
                return Err(Error::corrupt(format!(
                    "worker {} sent {} elements, expected {}",
                    e.src,
                    msg.len(),
                    range.len()
                )));
            }
            let dst = &mut buf[range.clone()];
            match e.op {
                EventOp::Reduce => {
                    let site = ReduceSite {
                        step: e.step,
                        src: e.src,
                        dst: e.dst,
                        offset: range.start,
                    };
                    reduce(dst, &msg, site)?;
                    traffic.reduces += 1;
                }
                EventOp::Copy => dst.copy_from_slice(&msg),
            }
        }
    }
    Ok(traffic)
}

pub fn allgather_worker(
    t: &mut dyn Transport,
    own: &[u8],
    round: u32,
) -> Result<(Vec<Vec<u8>>, WorkerTraffic)> {
    let (me, n) = (t.rank(), t.world());
    let mut traffic = WorkerTraffic::default();
    for dst in (0..n).filter(|&j| j != me) {
        traffic.bytes_sent += own.len() as u64;
        traffic.messages += 1;
        t.send(dst, Frame::new(MsgType::Sparse, round, own.to_vec()))?;
    }
    let mut out = Vec::with_capacity(n);
    for src in 0..n {
        if src == me {
            out.push(own.to_vec());
        } else {
            let f = t.recv(src)?;
            f.expect(MsgType::Sparse, round)?;
            out.push(f.payload);
        }
    }
    Ok((out, traffic))
}

pub fn norm_allreduce_worker(
    t: &mut dyn Transport,
    stat: f64,
    spec: NormSpec,
    topo: &Topology,
    round: u32,
) -> Result<(f64, WorkerTraffic)> {
    let mut buf = [stat];
    let traffic = allreduce_worker(t, topo, &mut buf, Width::W32, round, &norm_reduce(spec))?;
    Ok((norm_finish(buf[0], spec), traffic))
}
