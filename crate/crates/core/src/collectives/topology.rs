use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyKind {
    #[serde(rename = "tree")]
    BinaryTree,
    Ring,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventOp {
    /// `dst[range] <- reduce(dst[range], src[range])`
    Reduce,
    /// `dst[range] <- src[range]`
    Copy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub step: u32,
    pub src: usize,
    pub dst: usize,
    pub op: EventOp,
    /// Ring chunk id; `None` means the whole buffer.
    pub chunk: Option<usize>,
}

/// A deterministic communication schedule for an Allreduce over `n` workers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    n: usize,
    kind: TopologyKind,
    schedule: Vec<Event>,
    steps: u32,
}

impl Topology {
    pub fn new(n: usize, kind: TopologyKind) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid_arg("a topology needs at least one worker"));
        }
        let schedule = match kind {
            TopologyKind::BinaryTree => tree_schedule(n),
            TopologyKind::Ring => ring_schedule(n),
        };
        let steps = schedule.last().map_or(0, |e| e.step + 1);
        Ok(Self {
            n,
            kind,
            schedule,
            steps,
        })
    }

    pub fn tree(n: usize) -> Result<Self> {
        Self::new(n, TopologyKind::BinaryTree)
    }

    pub fn ring(n: usize) -> Result<Self> {
        Self::new(n, TopologyKind::Ring)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> TopologyKind {
        self.kind
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    /// Events ordered by step.
    pub fn schedule(&self) -> &[Event] {
        &self.schedule
    }

    pub fn reduce_events(&self) -> usize {
        self.schedule.iter().filter(|e| e.op == EventOp::Reduce).count()
    }

    /// Payload traffic of one Allreduce of `d` elements of `elem_bytes` each,
    /// derived from the schedule alone.
    pub fn traffic(&self, d: usize, elem_bytes: usize) -> super::TrafficReport {
        let mut r = super::TrafficReport::new(self.n);
        r.steps = self.steps;
        for e in &self.schedule {
            r.record(e.src, self.range(e, d).len() * elem_bytes);
            if e.op == EventOp::Reduce {
                r.reduce_invocations += 1;
            }
        }
        r
    }

    /// Element range an event moves for a buffer of `d` elements.
    pub fn range(&self, e: &Event, d: usize) -> Range<usize> {
        match e.chunk {
            None => 0..d,
            Some(c) => chunk_range(d, self.n, c),
        }
    }
}

/// Balanced split of `0..d` into `parts` contiguous chunks.
pub fn chunk_range(d: usize, parts: usize, c: usize) -> Range<usize> {
    (c * d / parts)..((c + 1) * d / parts)
}

/// Binomial reduce towards worker 0 followed by the mirrored broadcast.
/// For `n` not a power of two the tree leans left: missing right subtrees
/// are skipped.
fn tree_schedule(n: usize) -> Vec<Event> {
    let depth = n.next_power_of_two().trailing_zeros();
    let mut out = Vec::with_capacity(2 * n.saturating_sub(1));
    for h in 0..depth {
        let half = 1usize << h;
        for r in (half..n).step_by(2 * half) {
            out.push(Event {
                step: h,
                src: r,
                dst: r - half,
                op: EventOp::Reduce,
                chunk: None,
            });
        }
    }
    for (i, h) in (0..depth).rev().enumerate() {
        let half = 1usize << h;
        for r in (0..n).step_by(2 * half) {
            if r + half < n {
                out.push(Event {
                    step: depth + i as u32,
                    src: r,
                    dst: r + half,
                    op: EventOp::Copy,
                    chunk: None,
                });
            }
        }
    }
    out
}

/// Scatter-reduce then allgather around the ring `r -> r + 1`.
fn ring_schedule(n: usize) -> Vec<Event> {
    let mut out = Vec::with_capacity(2 * n * n.saturating_sub(1));
    let rounds = n.saturating_sub(1);
    for t in 0..rounds {
        for r in 0..n {
            out.push(Event {
                step: t as u32,
                src: r,
                dst: (r + 1) % n,
                op: EventOp::Reduce,
                chunk: Some((r + n - t) % n),
            });
        }
    }
    for t in 0..rounds {
        for r in 0..n {
            out.push(Event {
                step: (rounds + t) as u32,
                src: r,
                dst: (r + 1) % n,
                op: EventOp::Copy,
                chunk: Some((r + 1 + n - t) % n),
            });
        }
    }
    out
}
