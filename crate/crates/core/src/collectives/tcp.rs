use std::io::ErrorKind;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use super::{read_frame, write_frame, Frame, MsgType, Transport};
use crate::error::{Error, Result};

/// Length-prefixed frames over one TCP connection per worker pair.
///
/// Every connection has a reader thread that drains it into a queue, so
/// large simultaneous sends cannot deadlock.
pub struct TcpTransport {
    rank: usize,
    world: usize,
    writers: Vec<Option<TcpStream>>,
    inbox: Vec<Option<Receiver<Result<Frame>>>>,
    timeout: Duration,
}

fn hello(rank: usize, world: usize) -> Frame {
    let mut p = Vec::with_capacity(8);
    p.extend_from_slice(&(rank as u32).to_le_bytes());
    p.extend_from_slice(&(world as u32).to_le_bytes());
    Frame::new(MsgType::Ctrl, 0, p)
}

fn parse_hello(f: &Frame, world: usize) -> Result<usize> {
    f.expect(MsgType::Ctrl, 0)?;
    if f.payload.len() != 8 {
        return Err(Error::Protocol("malformed handshake".into()));
    }
    let rank = u32::from_le_bytes(f.payload[..4].try_into().unwrap()) as usize;
    let their_world = u32::from_le_bytes(f.payload[4..].try_into().unwrap()) as usize;
    if their_world != world || rank >= world {
        return Err(Error::Protocol(format!(
            "peer claims rank {rank} of {their_world}, expected a rank of {world}"
        )));
    }
    Ok(rank)
}

fn aborted(e: impl std::fmt::Display) -> Error {
    Error::AbortedCollective(e.to_string())
}

impl TcpTransport {
    /// Join the mesh as `rank`. `peers[j]` is worker j's listen address;
    /// `listener` must be bound to `peers[rank]`. Lower ranks are dialled,
    /// higher ranks dial in.
    pub fn connect(
        rank: usize,
        listener: TcpListener,
        peers: &[SocketAddr],
        timeout: Duration,
    ) -> Result<Self> {
        let world = peers.len();
        if rank >= world {
            return Err(Error::invalid_arg(format!("rank {rank} outside {world} peers")));
        }
        let deadline = Instant::now() + timeout;
        let mut streams: Vec<Option<TcpStream>> = (0..world).map(|_| None).collect();

        for (j, addr) in peers.iter().enumerate().take(rank) {
            let mut s = loop {
                match TcpStream::connect_timeout(addr, Duration::from_secs(1)) {
                    Ok(s) => break s,
                    Err(e) if Instant::now() >= deadline => {
                        return Err(aborted(format!("cannot reach worker {j} at {addr}: {e}")))
                    }
                    Err(_) => thread::sleep(Duration::from_millis(20)),
                }
            };
            s.set_nodelay(true)?;
            write_frame(&mut s, &hello(rank, world))?;
            streams[j] = Some(s);
        }

        listener.set_nonblocking(true)?;
        let mut pending = world - 1 - rank;
        while pending > 0 {
            match listener.accept() {
                Ok((mut s, _)) => {
                    s.set_nonblocking(false)?;
                    s.set_nodelay(true)?;
                    s.set_read_timeout(Some(timeout))?;
                    let f = read_frame(&mut s)?
                        .ok_or_else(|| Error::Protocol("peer closed during handshake".into()))?;
                    let j = parse_hello(&f, world)?;
                    if j <= rank || streams[j].is_some() {
                        return Err(Error::Protocol(format!("unexpected handshake from rank {j}")));
                    }
                    s.set_read_timeout(None)?;
                    streams[j] = Some(s);
                    pending -= 1;
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(aborted(format!("{pending} peers never connected to worker {rank}")));
                    }
                    thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(e.into()),
            }
        }

        let mut inbox = Vec::with_capacity(world);
        for s in &streams {
            let Some(s) = s else {
                inbox.push(None);
                continue;
            };
            let mut r = s.try_clone()?;
            let (tx, rx) = channel();
            thread::spawn(move || loop {
                match read_frame(&mut r) {
                    Ok(Some(f)) => {
                        if tx.send(Ok(f)).is_err() {
                            break;
                        }
                    }
                    Ok(None) => break,
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        break;
                    }
                }
            });
            inbox.push(Some(rx));
        }
        Ok(Self {
            rank,
            world,
            writers: streams,
            inbox,
            timeout,
        })
    }

    /// A full mesh of `n` workers on loopback, one endpoint per worker.
    pub fn local_mesh(n: usize, timeout: Duration) -> Result<Vec<Self>> {
        let listeners = (0..n)
            .map(|_| TcpListener::bind("127.0.0.1:0"))
            .collect::<std::io::Result<Vec<_>>>()?;
        let addrs = listeners
            .iter()
            .map(|l| l.local_addr())
            .collect::<std::io::Result<Vec<_>>>()?;
        let addrs = &addrs;
        thread::scope(|scope| {
            let handles: Vec<_> = listeners
                .into_iter()
                .enumerate()
                .map(|(rank, l)| scope.spawn(move || Self::connect(rank, l, addrs, timeout)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(aborted("handshake thread panicked"))))
                .collect()
        })
    }
}

impl Transport for TcpTransport {
    fn rank(&self) -> usize {
        self.rank
    }

    fn world(&self) -> usize {
        self.world
    }

    fn send(&mut self, dst: usize, frame: Frame) -> Result<()> {
        let s = self
            .writers
            .get_mut(dst)
            .and_then(|s| s.as_mut())
            .ok_or_else(|| Error::invalid_arg(format!("worker {} has no link to {dst}", self.rank)))?;
        write_frame(s, &frame).map_err(|e| aborted(format!("send to worker {dst} failed: {e}")))
    }

    fn recv(&mut self, src: usize) -> Result<Frame> {
        let rx = self
            .inbox
            .get(src)
            .and_then(|r| r.as_ref())
            .ok_or_else(|| Error::invalid_arg(format!("worker {} has no link to {src}", self.rank)))?;
        match rx.recv_timeout(self.timeout) {
            Ok(Ok(f)) => Ok(f),
            Ok(Err(e)) => Err(aborted(format!("link to worker {src} broke: {e}"))),
            Err(RecvTimeoutError::Disconnected) => Err(aborted(format!("worker {src} hung up"))),
            Err(RecvTimeoutError::Timeout) => {
                Err(aborted(format!("timed out waiting for worker {src}")))
            }
        }
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        for s in self.writers.iter().flatten() {
            let _ = s.shutdown(Shutdown::Write);
        }
    }
}
