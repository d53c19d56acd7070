//! Network plumbing: UDP receive loop, per-meter worker shards, command
//! retransmission and the HTTP listener.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use thiserror::Error;
use tokio::net::{TcpListener, UdpSocket};
use tokio::sync::{mpsc, oneshot, watch};
use tokio::task::JoinSet;
use yomo_core::protocol::{HEADER_LEN, MAX_DATAGRAM_LEN};

use crate::api::{self, AppState};
use crate::config::CoordinatorConfig;
use crate::coordinator::{Coordinator, Dispatch, IngestOutcome};
use crate::store::{Store, StoreError};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("cannot bind {proto} port {port} on {addr}: {source}")]
    Bind {
        proto: &'static str,
        port: u16,
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error("runtime error: {0}")]
    Runtime(#[from] std::io::Error),
}

/// Sends commands and retransmits them until acked or out of attempts.
#[derive(Clone)]
pub struct CommandSender {
    socket: Arc<UdpSocket>,
    coordinator: Arc<Coordinator>,
    interval: Duration,
    attempts: u32,
}

impl CommandSender {
    pub fn spawn(&self, dispatch: Dispatch) {
        let this = self.clone();
        tokio::spawn(async move { this.run(dispatch).await });
    }

    async fn run(self, d: Dispatch) {
        let id = d.ticket.command_id;
        for _ in 0..self.attempts {
            if !self.coordinator.begin_attempt(id) {
                return;
            }
            if let Err(e) = self.socket.send_to(&d.datagram, d.target).await {
                tracing::warn!(command_id = id, error = %e, "command send failed");
            }
            if tokio::time::timeout(self.interval, d.acked.notified()).await.is_ok() {
                return;
            }
        }
        self.coordinator.fail(id);
        tracing::warn!(command_id = id, "command unacknowledged after retries");
    }
}

/// A coordinator running inside the current tokio runtime.
pub struct RunningCoordinator {
    pub udp_addr: SocketAddr,
    pub http_addr: SocketAddr,
    pub coordinator: Arc<Coordinator>,
    shutdown: watch::Sender<bool>,
    tasks: JoinSet<()>,
}

/// Kernel receive buffer requested for the UDP socket, so bursts from many
/// meters survive while workers are busy. The kernel may cap it lower.
const UDP_RECV_BUFFER: usize = 4 << 20;

async fn bind_udp(addr: SocketAddr) -> Result<UdpSocket, ServiceError> {
    let bind = || -> std::io::Result<UdpSocket> {
        let socket = socket2::Socket::new(
            socket2::Domain::for_address(addr),
            socket2::Type::DGRAM,
            Some(socket2::Protocol::UDP),
        )?;
        if let Err(e) = socket.set_recv_buffer_size(UDP_RECV_BUFFER) {
            tracing::warn!(error = %e, "cannot enlarge UDP receive buffer");
        }
        socket.set_nonblocking(true)?;
        socket.bind(&addr.into())?;
        UdpSocket::from_std(socket.into())
    };
    bind().map_err(|source| ServiceError::Bind {
        proto: "UDP",
        port: addr.port(),
        addr,
        source,
    })
}

async fn bind_tcp(addr: SocketAddr) -> Result<TcpListener, ServiceError> {
    TcpListener::bind(addr).await.map_err(|source| ServiceError::Bind {
        proto: "HTTP",
        port: addr.port(),
        addr,
        source,
    })
}

/// Worker shard for a raw datagram: the meter id bytes when present, so all
/// datagrams of one meter are handled in arrival order by one worker.
fn shard(bytes: &[u8], workers: usize) -> usize {
    let key = bytes
        .get(4..HEADER_LEN)
        .map_or(0, |id| id.iter().fold(0usize, |h, &b| h.wrapping_mul(31).wrapping_add(b as usize)));
    key % workers
}

impl RunningCoordinator {
    pub async fn start(config: &CoordinatorConfig) -> Result<Self, ServiceError> {
        config.validate().map_err(ServiceError::Config)?;
        let store = Store::open(&config.data_dir)?;
        let coordinator = Arc::new(Coordinator::open(store, config.liveness()));
        Self::start_with(config, coordinator).await
    }

    pub async fn start_with(
        config: &CoordinatorConfig,
        coordinator: Arc<Coordinator>,
    ) -> Result<Self, ServiceError> {
        let socket = Arc::new(bind_udp(config.udp_addr()).await?);
        let listener = bind_tcp(config.http_addr()).await?;
        let udp_addr = socket.local_addr()?;
        let http_addr = listener.local_addr()?;
        let (shutdown, shutdown_rx) = watch::channel(false);
        let mut tasks = JoinSet::new();

        let per_worker = config.queue_capacity.div_ceil(config.workers);
        let mut queues = Vec::with_capacity(config.workers);
        for _ in 0..config.workers {
            let (tx, mut rx) = mpsc::channel::<(Vec<u8>, SocketAddr)>(per_worker);
            queues.push(tx);
            let coordinator = coordinator.clone();
            let socket = socket.clone();
            tasks.spawn(async move {
                while let Some((bytes, src)) = rx.recv().await {
                    if let IngestOutcome::Reply(reply) = coordinator.ingest(&bytes, src) {
                        if let Err(e) = socket.send_to(&reply, src).await {
                            tracing::warn!(%src, error = %e, "reply send failed");
                        }
                    }
                }
            });
        }

        {
            let socket = socket.clone();
            let coordinator = coordinator.clone();
            let mut stop = shutdown_rx.clone();
            tasks.spawn(async move {
                // Room past the protocol limit so oversize datagrams are seen
                // as such rather than silently truncated to a valid length.
                let mut buf = vec![0u8; 4 * MAX_DATAGRAM_LEN];
                loop {
                    tokio::select! {
                        _ = stop.changed() => break,
                        r = socket.recv_from(&mut buf) => match r {
                            Ok((n, src)) => {
                                let bytes = buf[..n].to_vec();
                                let q = &queues[shard(&bytes, queues.len())];
                                if q.try_send((bytes, src)).is_err() {
                                    coordinator.count_overflow();
                                }
                            }
                            Err(e) => tracing::warn!(error = %e, "udp receive failed"),
                        },
                    }
                }
                // Dropping the queues lets the workers drain and exit.
            });
        }

        let sender = CommandSender {
            socket: socket.clone(),
            coordinator: coordinator.clone(),
            interval: config.retry_interval(),
            attempts: config.retry_attempts,
        };
        let app = api::router(
            AppState {
                coordinator: coordinator.clone(),
                sender,
            },
            &config.cors_origin,
        );
        let mut stop = shutdown_rx;
        tasks.spawn(async move {
            let graceful = async move {
                let _ = stop.changed().await;
            };
            if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(graceful).await {
                tracing::error!(error = %e, "http server failed");
            }
        });

        tracing::info!(%udp_addr, %http_addr, "coordinator listening");
        Ok(Self {
            udp_addr,
            http_addr,
            coordinator,
            shutdown,
            tasks,
        })
    }

    /// Stops accepting datagrams, drains queued ones and closes the API.
    pub async fn shutdown(mut self) {
        let _ = self.shutdown.send(true);
        while self.tasks.join_next().await.is_some() {}
    }
}

/// A coordinator on its own thread and runtime, for synchronous callers.
pub struct BackgroundCoordinator {
    pub udp_addr: SocketAddr,
    pub http_addr: SocketAddr,
    pub coordinator: Arc<Coordinator>,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<thread::JoinHandle<()>>,
}

impl BackgroundCoordinator {
    pub fn spawn(config: CoordinatorConfig) -> Result<Self, ServiceError> {
        let (ready_tx, ready_rx) = std::sync::mpsc::channel();
        let (stop_tx, stop_rx) = oneshot::channel::<()>();
        let thread = thread::Builder::new()
            .name("coordinator".into())
            .spawn(move || {
                let rt = match tokio::runtime::Builder::new_multi_thread()
                    .worker_threads(2)
                    .enable_all()
                    .build()
                {
                    Ok(rt) => rt,
                    Err(e) => {
                        let _ = ready_tx.send(Err(ServiceError::Runtime(e)));
                        return;
                    }
                };
                rt.block_on(async move {
                    match RunningCoordinator::start(&config).await {
                        Ok(running) => {
                            let _ = ready_tx.send(Ok((
                                running.udp_addr,
                                running.http_addr,
                                running.coordinator.clone(),
                            )));
                            let _ = stop_rx.await;
                            running.shutdown().await;
                        }
                        Err(e) => {
                            let _ = ready_tx.send(Err(e));
                        }
                    }
                });
            })?;
        let (udp_addr, http_addr, coordinator) = ready_rx
            .recv()
            .map_err(|_| ServiceError::Config("coordinator thread exited early".into()))??;
        Ok(Self {
            udp_addr,
            http_addr,
            coordinator,
            stop: Some(stop_tx),
            thread: Some(thread),
        })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.http_addr)
    }

    /// Shuts down and waits until every queued datagram is persisted.
    pub fn stop(mut self) {
        self.stop_inner();
    }

    fn stop_inner(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for BackgroundCoordinator {
    fn drop(&mut self) {
        self.stop_inner();
    }
}
