use super::{check_shapes, EventOp, Lane, ReduceFn, ReduceSite, Topology, TrafficReport};
use crate::error::Result;
use crate::wire::Width;

/// Sequential executor: replays the schedule step by step against all
/// worker buffers. Messages within a step are snapshotted before any is
/// applied, so results match a concurrent execution.
pub fn simulate_allreduce<T: Lane>(
    topo: &Topology,
    mut bufs: Vec<Vec<T>>,
    w: Width,
    reduce: &ReduceFn<'_, T>,
) -> Result<(Vec<Vec<T>>, TrafficReport)> {
    let d = check_shapes(&bufs, topo.n())?;
    let mut report = TrafficReport::new(topo.n());
    report.steps = topo.steps();
    for step in topo.schedule().chunk_by(|a, b| a.step == b.step) {
        let msgs: Vec<Vec<T>> = step
            .iter()
            .map(|e| bufs[e.src][topo.range(e, d)].to_vec())
            .collect();
        for (e, msg) in step.iter().zip(msgs) {
            let range = topo.range(e, d);
            report.record(e.src, T::wire_bytes(msg.len(), w));
            let dst = &mut bufs[e.dst][range.clone()];
            match e.op {
                EventOp::Reduce => {
                    let site = ReduceSite {
                        step: e.step,
                        src: e.src,
                        dst: e.dst,
                        offset: range.start,
                    };
                    reduce(dst, &msg, site)?;
                    report.reduce_invocations += 1;
                }
                EventOp::Copy => dst.copy_from_slice(&msg),
            }
        }
    }
    Ok((bufs, report))
}

pub fn simulate_allgather(blobs: Vec<Vec<u8>>) -> (Vec<Vec<Vec<u8>>>, TrafficReport) {
    let n = blobs.len();
    let mut report = TrafficReport::new(n);
    report.steps = u32::from(n > 1);
    for (i, b) in blobs.iter().enumerate() {
        for _ in 1..n {
            report.record(i, b.len());
        }
    }
    ((0..n).map(|_| blobs.clone()).collect(), report)
}
