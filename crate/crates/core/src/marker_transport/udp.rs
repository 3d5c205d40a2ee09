use std::io::ErrorKind;
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::time::{Duration, Instant};

use super::wire::MarkerEvent;
use super::TransportError;

pub const DEFAULT_SEND_BUDGET: Duration = Duration::from_millis(2);

fn resolve(endpoint: impl ToSocketAddrs + std::fmt::Debug) -> Result<SocketAddr, TransportError> {
    let label = format!("{endpoint:?}");
    endpoint
        .to_socket_addrs()
        .map_err(|_| TransportError::Resolve(label.clone()))?
        .next()
        .ok_or(TransportError::Resolve(label))
}

/// Fire-and-forget marker emitter. The socket is non-blocking: a datagram
/// that cannot be queued immediately is dropped and reported, never waited on.
#[derive(Debug)]
pub struct MarkerSender {
    socket: UdpSocket,
    dest: SocketAddr,
    budget: Duration,
    next_id: u64,
}

impl MarkerSender {
    pub fn connect(endpoint: impl ToSocketAddrs + std::fmt::Debug, budget: Duration) -> Result<Self, TransportError> {
        let dest = resolve(endpoint)?;
        let bind: SocketAddr = if dest.is_ipv4() {
            "0.0.0.0:0".parse().unwrap()
        } else {
            "[::]:0".parse().unwrap()
        };
        let socket = UdpSocket::bind(bind)?;
        socket.set_broadcast(true)?;
        socket.set_nonblocking(true)?;
        Ok(MarkerSender {
            socket,
            dest,
            budget,
            next_id: 0,
        })
    }

    pub fn dest(&self) -> SocketAddr {
        self.dest
    }

    pub fn budget(&self) -> Duration {
        self.budget
    }

    /// Sends one marker. Returns the time spent in the send call.
    pub fn send(&mut self, marker: &MarkerEvent) -> Result<Duration, TransportError> {
        let payload = marker.encode();
        let started = Instant::now();
        let deadline = started + self.budget;
        loop {
            match self.socket.send_to(payload.as_bytes(), self.dest) {
                Ok(_) => {
                    self.next_id = self.next_id.max(marker.id + 1);
                    return Ok(started.elapsed());
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock || e.kind() == ErrorKind::Interrupted => {
                    if Instant::now() >= deadline {
                        return Err(TransportError::Dropped);
                    }
                    std::hint::spin_loop();
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Assigns the next sequence id and sends.
    pub fn mark(&mut self, time: f64, label: &str) -> Result<MarkerEvent, TransportError> {
        let marker = MarkerEvent::new(self.next_id, time, label)?;
        self.send(&marker)?;
        Ok(marker)
    }
}

/// One-shot send to `endpoint`.
pub fn broadcast_marker(
    marker: &MarkerEvent,
    endpoint: impl ToSocketAddrs + std::fmt::Debug,
) -> Result<(), TransportError> {
    MarkerSender::connect(endpoint, DEFAULT_SEND_BUDGET)?.send(marker)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReceiverStats {
    pub received: u64,
    /// Ids skipped over; datagrams presumed lost.
    pub missing: u64,
    /// Ids at or below one already seen.
    pub out_of_order: u64,
    pub malformed: u64,
}

#[derive(Debug)]
pub struct MarkerReceiver {
    socket: UdpSocket,
    last_id: Option<u64>,
    stats: ReceiverStats,
    buf: Vec<u8>,
}

impl MarkerReceiver {
    pub fn bind(endpoint: impl ToSocketAddrs + std::fmt::Debug) -> Result<Self, TransportError> {
        let addr = resolve(endpoint)?;
        Ok(MarkerReceiver {
            socket: UdpSocket::bind(addr)?,
            last_id: None,
            stats: ReceiverStats::default(),
            buf: vec![0; 2048],
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, TransportError> {
        Ok(self.socket.local_addr()?)
    }

    pub fn stats(&self) -> ReceiverStats {
        self.stats
    }

    /// Next well-formed marker, or `None` once `timeout` passes without one.
    pub fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<MarkerEvent>, TransportError> {
        let deadline = Instant::now() + timeout;
        loop {
            let remaining = deadline.saturating_duration_since(Instant::now());
            if remaining.is_zero() {
                return Ok(None);
            }
            self.socket.set_read_timeout(Some(remaining))?;
            let n = match self.socket.recv_from(&mut self.buf) {
                Ok((n, _)) => n,
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => return Ok(None),
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            };
            let parsed = std::str::from_utf8(&self.buf[..n])
                .ok()
                .and_then(|s| MarkerEvent::decode(s).ok());
            let Some(marker) = parsed else {
                self.stats.malformed += 1;
                continue;
            };
            self.stats.received += 1;
            match self.last_id {
                Some(last) if marker.id <= last => self.stats.out_of_order += 1,
                Some(last) => {
                    self.stats.missing += marker.id - last - 1;
                    self.last_id = Some(marker.id);
                }
                None => {
                    self.stats.missing += marker.id;
                    self.last_id = Some(marker.id);
                }
            }
            return Ok(Some(marker));
        }
    }
}
