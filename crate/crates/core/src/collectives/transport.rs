use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Frame, TcpTransport};
use crate::error::{Error, Result};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

/// Point-to-point links between the workers of one cluster.
pub trait Transport: Send {
    fn rank(&self) -> usize;
    fn world(&self) -> usize;
    fn send(&mut self, dst: usize, frame: Frame) -> Result<()>;
    /// Next frame from `src`, in send order.
    fn recv(&mut self, src: usize) -> Result<Frame>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    /// Sequential in-process scheduler.
    #[default]
    Sim,
    /// One thread per worker over in-memory queues.
    Threads,
    /// One thread per worker over loopback TCP.
    Tcp,
}

impl std::str::FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sim" | "inproc" => Ok(Backend::Sim),
            "threads" => Ok(Backend::Threads),
            "tcp" => Ok(Backend::Tcp),
            _ => Err(Error::invalid_arg(format!("unknown backend {s:?}"))),
        }
    }
}

pub struct ChannelTransport {
    rank: usize,
    tx: Vec<Option<Sender<Frame>>>,
    rx: Vec<Option<Receiver<Frame>>>,
    timeout: Duration,
}

impl ChannelTransport {
    /// Fully connected mesh of `n` endpoints.
    pub fn mesh(n: usize) -> Vec<ChannelTransport> {
        let mut eps: Vec<ChannelTransport> = (0..n)
            .map(|rank| ChannelTransport {
                rank,
                tx: (0..n).map(|_| None).collect(),
                rx: (0..n).map(|_| None).collect(),
                timeout: DEFAULT_TIMEOUT,
            })
            .collect();
        for src in 0..n {
            for dst in (0..n).filter(|&d| d != src) {
                let (tx, rx) = channel();
                eps[src].tx[dst] = Some(tx);
                eps[dst].rx[src] = Some(rx);
            }
        }
        eps
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }
}

fn peer_check(me: usize, peer: usize, n: usize) -> Result<()> {
    if peer >= n || peer == me {
        return Err(Error::invalid_arg(format!("worker {me} has no link to {peer}")));
    }
    Ok(())
}

impl Transport for ChannelTransport {
    fn rank(&self) -> usize {
        self.rank
    }

    fn world(&self) -> usize {
        self.tx.len()
    }

    fn send(&mut self, dst: usize, frame: Frame) -> Result<()> {
        peer_check(self.rank, dst, self.world())?;
        self.tx[dst]
            .as_ref()
            .unwrap()
            .send(frame)
            .map_err(|_| Error::AbortedCollective(format!("worker {dst} is gone")))
    }

    fn recv(&mut self, src: usize) -> Result<Frame> {
        peer_check(self.rank, src, self.world())?;
        match self.rx[src].as_ref().unwrap().recv_timeout(self.timeout) {
            Ok(f) => Ok(f),
            Err(RecvTimeoutError::Disconnected) => {
                Err(Error::AbortedCollective(format!("worker {src} is gone")))
            }
            Err(RecvTimeoutError::Timeout) => Err(Error::AbortedCollective(format!(
                "timed out waiting for worker {src}"
            ))),
        }
    }
}

/// Run `f` once per worker on its own thread over a fresh mesh.
///
/// If any worker fails the whole collective fails; the reported error is the
/// first one that was not merely a consequence of another worker leaving.
pub fn run_cluster<R, F>(backend: Backend, n: usize, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(&mut dyn Transport) -> Result<R> + Sync,
{
    if n == 0 {
        return Err(Error::invalid_arg("cluster needs at least one worker"));
    }
    let endpoints: Vec<Box<dyn Transport>> = match backend {
        Backend::Sim => {
            return Err(Error::invalid_arg(
                "the sim backend does not run per-worker programs",
            ))
        }
        Backend::Threads => ChannelTransport::mesh(n)
            .into_iter()
            .map(|t| Box::new(t) as Box<dyn Transport>)
            .collect(),
        Backend::Tcp => TcpTransport::local_mesh(n, DEFAULT_TIMEOUT)?
            .into_iter()
            .map(|t| Box::new(t) as Box<dyn Transport>)
            .collect(),
    };
    let f = &f;
    let results: Vec<Result<R>> = std::thread::scope(|scope| {
        let handles: Vec<_> = endpoints
            .into_iter()
            .map(|mut t| {
                scope.spawn(move || {
                    let r = f(t.as_mut());
                    drop(t);
                    r
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::AbortedCollective("worker panicked".into())))
            })
            .collect()
    });
    if results.iter().all(|r| r.is_ok()) {
        return Ok(results.into_iter().map(|r| r.ok().unwrap()).collect());
    }
    let mut errs: Vec<Error> = results.into_iter().filter_map(|r| r.err()).collect();
    let root = errs
        .iter()
        .position(|e| !matches!(e, Error::AbortedCollective(_)))
        .unwrap_or(0);
    Err(errs.swap_remove(root))
}
