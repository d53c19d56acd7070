//! Datagram links from a node to its coordinator.

use std::io;
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use yomo_core::protocol::{decode, Body};
use yomo_core::MeterId;

pub trait Transport: Send {
    fn send(&mut self, datagram: &[u8]) -> io::Result<()>;
    /// Next inbound datagram. `Duration::ZERO` polls without blocking;
    /// `Ok(None)` means nothing arrived in time.
    fn recv(&mut self, timeout: Duration) -> io::Result<Option<Vec<u8>>>;
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn send(&mut self, datagram: &[u8]) -> io::Result<()> {
        (**self).send(datagram)
    }

    fn recv(&mut self, timeout: Duration) -> io::Result<Option<Vec<u8>>> {
        (**self).recv(timeout)
    }
}

/// UDP socket connected to the coordinator; only its datagrams are received.
#[derive(Debug)]
pub struct UdpTransport {
    socket: UdpSocket,
    buf: Vec<u8>,
}

impl UdpTransport {
    pub fn connect(coordinator: impl ToSocketAddrs, bind: Option<SocketAddr>) -> io::Result<Self> {
        let target = coordinator
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "no coordinator address"))?;
        let bind = bind.unwrap_or_else(|| match target {
            SocketAddr::V4(_) => "0.0.0.0:0".parse().expect("literal"),
            SocketAddr::V6(_) => "[::]:0".parse().expect("literal"),
        });
        let socket = UdpSocket::bind(bind)?;
        socket.connect(target)?;
        Ok(Self {
            socket,
            buf: vec![0; 2048],
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.socket.local_addr()
    }
}

impl Transport for UdpTransport {
    fn send(&mut self, datagram: &[u8]) -> io::Result<()> {
        self.socket.send(datagram).map(drop)
    }

    fn recv(&mut self, timeout: Duration) -> io::Result<Option<Vec<u8>>> {
        if timeout.is_zero() {
            self.socket.set_nonblocking(true)?;
        } else {
            self.socket.set_nonblocking(false)?;
            self.socket.set_read_timeout(Some(timeout))?;
        }
        match self.socket.recv(&mut self.buf) {
            Ok(n) => Ok(Some(self.buf[..n].to_vec())),
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }
}

/// Record of measurements a [`LossyTransport`] discarded.
pub type DropLog = Arc<Mutex<Vec<(MeterId, u32)>>>;

/// Drops outbound measurement datagrams with a fixed probability from a
/// seeded stream. Commands, acks and handshakes pass untouched.
pub struct LossyTransport<T> {
    inner: T,
    loss: f64,
    rng: ChaCha8Rng,
    dropped: DropLog,
}

impl<T: Transport> LossyTransport<T> {
    pub fn new(inner: T, loss: f64, seed: u64) -> Self {
        Self {
            inner,
            loss: loss.clamp(0.0, 1.0),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dropped: DropLog::default(),
        }
    }

    pub fn drop_log(&self) -> DropLog {
        self.dropped.clone()
    }

    pub fn inner(&self) -> &T {
        &self.inner
    }
}

impl<T: Transport> Transport for LossyTransport<T> {
    fn send(&mut self, datagram: &[u8]) -> io::Result<()> {
        if let Ok(d) = decode(datagram) {
            if let Body::Measurement(m) = d.body {
                if self.rng.random_bool(self.loss) {
                    self.dropped.lock().expect("drop log").push((d.meter_id, m.seq));
                    return Ok(());
                }
            }
        }
        self.inner.send(datagram)
    }

    fn recv(&mut self, timeout: Duration) -> io::Result<Option<Vec<u8>>> {
        self.inner.recv(timeout)
    }
}
