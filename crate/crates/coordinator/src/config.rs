use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::time::Duration;

use clap::Args;

pub const DEFAULT_UDP_PORT: u16 = 7753;
pub const DEFAULT_HTTP_PORT: u16 = 8080;

/// Coordinator settings. Each flag can also come from the environment;
/// an explicit flag wins.
#[derive(Debug, Clone, PartialEq, Args)]
pub struct CoordinatorConfig {
    /// Address both listeners bind to.
    #[arg(long, env = "YOMO_BIND", default_value_t = IpAddr::V4(Ipv4Addr::UNSPECIFIED))]
    pub bind: IpAddr,
    /// UDP port for meter datagrams.
    #[arg(long, env = "YOMO_UDP_PORT", default_value_t = DEFAULT_UDP_PORT)]
    pub udp_port: u16,
    /// TCP port for the HTTP API.
    #[arg(long, env = "YOMO_HTTP_PORT", default_value_t = DEFAULT_HTTP_PORT)]
    pub http_port: u16,
    /// Directory holding meters.idx and the per-meter logs.
    #[arg(long, env = "YOMO_DATA_DIR", default_value = "data")]
    pub data_dir: PathBuf,
    /// Meters silent for longer than this cannot receive commands.
    #[arg(long, env = "YOMO_LIVENESS_S", default_value_t = 60.0)]
    pub liveness_s: f64,
    /// Transmissions per command before the ticket fails.
    #[arg(long, env = "YOMO_RETRY_ATTEMPTS", default_value_t = 3,
          value_parser = clap::value_parser!(u32).range(1..=3))]
    pub retry_attempts: u32,
    /// Wait for an acknowledgment before retransmitting.
    #[arg(long, env = "YOMO_RETRY_INTERVAL_MS", default_value_t = 500)]
    pub retry_interval_ms: u64,
    /// Datagrams buffered between the receive loop and the workers.
    #[arg(long, env = "YOMO_QUEUE_CAPACITY", default_value_t = 8192)]
    pub queue_capacity: usize,
    /// Decode/persist workers.
    #[arg(long, env = "YOMO_WORKERS", default_value_t = 4)]
    pub workers: usize,
    /// Allowed dashboard origin for CORS; `*` allows any.
    #[arg(long, env = "YOMO_CORS_ORIGIN", default_value = "*")]
    pub cors_origin: String,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        Self {
            bind: IpAddr::V4(Ipv4Addr::UNSPECIFIED),
            udp_port: DEFAULT_UDP_PORT,
            http_port: DEFAULT_HTTP_PORT,
            data_dir: PathBuf::from("data"),
            liveness_s: 60.0,
            retry_attempts: 3,
            retry_interval_ms: 500,
            queue_capacity: 8192,
            workers: 4,
            cors_origin: "*".into(),
        }
    }
}

impl CoordinatorConfig {
    /// Loopback listeners on OS-assigned ports, for tests and embedding.
    pub fn ephemeral(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            bind: IpAddr::V4(Ipv4Addr::LOCALHOST),
            udp_port: 0,
            http_port: 0,
            data_dir: data_dir.into(),
            ..Self::default()
        }
    }

    pub fn udp_addr(&self) -> SocketAddr {
        SocketAddr::new(self.bind, self.udp_port)
    }

    pub fn http_addr(&self) -> SocketAddr {
        SocketAddr::new(self.bind, self.http_port)
    }

    pub fn liveness(&self) -> Duration {
        Duration::from_secs_f64(self.liveness_s)
    }

    pub fn retry_interval(&self) -> Duration {
        Duration::from_millis(self.retry_interval_ms)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.liveness_s.is_finite() && self.liveness_s > 0.0) {
            return Err(format!("liveness window must be positive, got {}", self.liveness_s));
        }
        if !(1..=3).contains(&self.retry_attempts) {
            return Err(format!("retry attempts must be 1..=3, got {}", self.retry_attempts));
        }
        if self.queue_capacity == 0 || self.workers == 0 {
            return Err("queue capacity and worker count must be non-zero".into());
        }
        Ok(())
    }
}
