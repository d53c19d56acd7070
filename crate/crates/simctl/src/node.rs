//! Meter node process: a [`MeterState`] wired to a clock and a transport.
//!
//! Readings stay in the meter's ring buffer until a time-sync handshake has
//! succeeded, so a node started before its coordinator loses nothing as long
//! as the buffer holds.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use serde::Deserialize;
use thiserror::Error;
use yomo_core::fixtures::{builtin_profile, load_fixtures};
use yomo_core::monitor::{CommandEnvelope, DEFAULT_BUFFER_CAPACITY, DEFAULT_SAMPLING_FREQ};
use yomo_core::protocol::{decode, encode, time_sync, Body, Datagram};
use yomo_core::{ApplianceProfile, CommandOutcome, MeterConfig, MeterId, MeterState};

use crate::clock::Clock;
use crate::transport::Transport;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid node config: {0}")]
    Parse(String),
    #[error("unknown appliance profile `{0}`")]
    UnknownProfile(String),
    #[error(transparent)]
    Meter(#[from] yomo_core::Error),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum ProfileSpec {
    Named(String),
    Inline(ApplianceProfile<f64>),
}

fn default_coordinator() -> String {
    "127.0.0.1:7753".into()
}
fn default_fs() -> f64 {
    DEFAULT_SAMPLING_FREQ
}
fn default_capacity() -> usize {
    DEFAULT_BUFFER_CAPACITY
}
fn default_handshake_ms() -> u64 {
    500
}
fn default_resync_s() -> f64 {
    5.0
}

/// Node configuration file (TOML).
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub meter_id: MeterId,
    /// A bundled appliance name, a name from `fixtures`, or an inline table.
    pub profile: ProfileSpec,
    #[serde(default)]
    pub fixtures: Option<PathBuf>,
    #[serde(default = "default_coordinator")]
    pub coordinator: String,
    #[serde(default = "default_fs")]
    pub sampling_freq: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_capacity")]
    pub buffer_capacity: usize,
    /// Stop after this many readings; run until interrupted when absent.
    #[serde(default)]
    pub readings: Option<u32>,
    #[serde(default = "default_handshake_ms")]
    pub handshake_timeout_ms: u64,
    /// Node-clock seconds between handshake attempts while the link is down.
    #[serde(default = "default_resync_s")]
    pub resync_interval_s: f64,
    /// Fraction of measurement datagrams to drop on purpose.
    #[serde(default)]
    pub loss: f64,
}

impl NodeConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if !(0.0..=1.0).contains(&cfg.loss) {
            return Err(ConfigError::Parse(format!("loss must be within [0, 1], got {}", cfg.loss)));
        }
        if !(cfg.resync_interval_s.is_finite() && cfg.resync_interval_s > 0.0) {
            return Err(ConfigError::Parse("resync_interval_s must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse(&text)?;
        // Relative fixture paths are relative to the config file.
        if let (Some(f), Some(dir)) = (&cfg.fixtures, path.parent()) {
            if f.is_relative() {
                cfg.fixtures = Some(dir.join(f));
            }
        }
        Ok(cfg)
    }

    pub fn resolve_profile(&self) -> Result<ApplianceProfile<f64>, ConfigError> {
        let profile = match &self.profile {
            ProfileSpec::Inline(p) => p.clone(),
            ProfileSpec::Named(name) => {
                let from_file = match &self.fixtures {
                    Some(path) => load_fixtures(path)?
                        .into_iter()
                        .find(|f| f.profile.name.eq_ignore_ascii_case(name))
                        .map(|f| f.profile),
                    None => None,
                };
                from_file
                    .or_else(|| builtin_profile(name))
                    .ok_or_else(|| ConfigError::UnknownProfile(name.clone()))?
            }
        };
        profile.validate().map_err(yomo_core::Error::from)?;
        Ok(profile)
    }

    pub fn meter_state(&self) -> Result<MeterState, ConfigError> {
        let config = MeterConfig {
            buffer_capacity: self.buffer_capacity,
            seed: self.seed,
            ..MeterConfig::default()
        };
        Ok(MeterState::new(
            self.meter_id,
            self.resolve_profile()?,
            self.sampling_freq,
            config,
        )?)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NodeStats {
    pub emitted: u64,
    pub sent: u64,
    pub send_errors: u64,
    pub encode_errors: u64,
    pub handshakes: u64,
    pub commands: u64,
    pub rejected: u64,
}

pub struct MeterNode<C, T> {
    state: MeterState,
    clock: C,
    transport: T,
    link_up: bool,
    next_sync_at: f64,
    handshake_timeout: Duration,
    resync_interval: f64,
    inbox: Vec<CommandEnvelope>,
    stats: NodeStats,
}

/// Longest real-time wait between stop-flag checks.
const POLL_SLICE: Duration = Duration::from_millis(50);

impl<C: Clock, T: Transport> MeterNode<C, T> {
    pub fn new(state: MeterState, clock: C, transport: T) -> Self {
        Self {
            state,
            clock,
            transport,
            link_up: false,
            next_sync_at: f64::NEG_INFINITY,
            handshake_timeout: Duration::from_millis(default_handshake_ms()),
            resync_interval: default_resync_s(),
            inbox: Vec::new(),
            stats: NodeStats::default(),
        }
    }

    pub fn with_timing(mut self, handshake_timeout: Duration, resync_interval_s: f64) -> Self {
        self.handshake_timeout = handshake_timeout;
        self.resync_interval = resync_interval_s;
        self
    }

    pub fn state(&self) -> &MeterState {
        &self.state
    }

    pub fn clock(&self) -> &C {
        &self.clock
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn stats(&self) -> NodeStats {
        self.stats
    }

    pub fn link_up(&self) -> bool {
        self.link_up
    }

    fn link_down(&mut self) {
        self.link_up = false;
        self.next_sync_at = self.clock.now() + self.resync_interval;
    }

    /// Exchanges a time-sync request with the coordinator and adopts the
    /// resulting clock offset. Commands arriving meanwhile are kept.
    pub fn handshake(&mut self) -> bool {
        self.stats.handshakes += 1;
        let sent = self.clock.now_ms();
        let request = encode(&Datagram {
            meter_id: self.state.meter_id(),
            body: Body::TimeSyncRequest {
                request_sent_ms: sent,
            },
        });
        if let Err(e) = self.transport.send(&request) {
            tracing::debug!(error = %e, "time-sync request failed");
            self.link_down();
            return false;
        }
        let deadline = Instant::now() + self.handshake_timeout;
        while let Some(remaining) = deadline.checked_duration_since(Instant::now()) {
            let bytes = match self.transport.recv(remaining) {
                Ok(Some(b)) => b,
                Ok(None) => break,
                Err(e) => {
                    tracing::debug!(error = %e, "coordinator unreachable");
                    break;
                }
            };
            match decode(&bytes) {
                Ok(Datagram {
                    body:
                        Body::TimeSyncReply {
                            request_sent_ms,
                            coordinator_time_ms,
                        },
                    ..
                }) if request_sent_ms == sent => {
                    let received = self.clock.now_ms();
                    if let Ok(offset_ms) = time_sync(sent, received, coordinator_time_ms) {
                        self.state.set_clock_offset(offset_ms / 1000.0);
                        self.link_up = true;
                        tracing::info!(offset_ms, "time-sync complete");
                        return true;
                    }
                }
                Ok(d) => self.accept(d),
                Err(_) => {}
            }
        }
        tracing::warn!("no time-sync reply; buffering locally");
        self.link_down();
        false
    }

    fn accept(&mut self, d: Datagram) {
        if d.meter_id != self.state.meter_id() {
            return;
        }
        if let Body::Command(frame) = d.body {
            self.inbox.push(frame.to_envelope());
        }
    }

    /// Emits every reading due at the current clock time.
    pub fn tick(&mut self) -> usize {
        let now = self.clock.now();
        let mut n = 0;
        while self.state.tick(now).is_some() {
            n += 1;
        }
        self.stats.emitted += n as u64;
        n
    }

    /// Sends all buffered readings if the link is up (retrying the
    /// handshake when due). Returns the number sent.
    pub fn flush(&mut self) -> usize {
        if !self.link_up && self.clock.now() >= self.next_sync_at {
            self.handshake();
        }
        if !self.link_up {
            return 0;
        }
        let mut batch = self.state.drain_buffer(usize::MAX).into_iter();
        let mut sent = 0;
        while let Some(reading) = batch.next() {
            let datagram = match Datagram::measurement(&reading) {
                Ok(d) => encode(&d),
                Err(e) => {
                    self.stats.encode_errors += 1;
                    tracing::error!(seq = reading.seq, error = %e, "unencodable reading dropped");
                    continue;
                }
            };
            if let Err(e) = self.transport.send(&datagram) {
                self.stats.send_errors += 1;
                tracing::warn!(error = %e, "send failed; buffering locally");
                let mut rest = vec![reading];
                rest.extend(batch);
                self.state.requeue_front(rest);
                self.link_down();
                break;
            }
            sent += 1;
        }
        self.stats.sent += sent as u64;
        sent
    }

    /// Applies inbound commands and acknowledges each one. Waits up to
    /// `wait` for the first datagram, then takes whatever else is queued.
    pub fn command_window(&mut self, wait: Duration) -> Vec<(u32, CommandOutcome)> {
        let mut wait = wait;
        loop {
            match self.transport.recv(wait) {
                Ok(Some(bytes)) => {
                    if let Ok(d) = decode(&bytes) {
                        self.accept(d);
                    }
                    wait = Duration::ZERO;
                }
                Ok(None) => break,
                Err(e) => {
                    tracing::debug!(error = %e, "receive failed");
                    self.link_down();
                    break;
                }
            }
        }
        let inbox = std::mem::take(&mut self.inbox);
        let outcomes = self.state.command_window(inbox);
        for &(command_id, outcome) in &outcomes {
            self.stats.commands += 1;
            if !outcome.is_accepted() {
                self.stats.rejected += 1;
            }
            tracing::info!(command_id, ?outcome, "command applied");
            let ack = encode(&Datagram::ack(self.state.meter_id(), command_id, outcome.into()));
            if let Err(e) = self.transport.send(&ack) {
                tracing::warn!(command_id, error = %e, "ack send failed");
            }
        }
        outcomes
    }

    /// Waits (handling commands) until the next reading is due, then emits
    /// and transmits. Returns the number of readings emitted.
    pub fn step(&mut self, stop: &AtomicBool) -> usize {
        while !stop.load(Ordering::Relaxed) {
            let now = self.clock.now();
            let Some(due) = self.state.next_emission() else {
                // No open window: asleep, or awake but not yet anchored.
                if self.state.sleeping() {
                    self.wait(self.state.measurement_period());
                }
                break;
            };
            if due <= now {
                break;
            }
            self.wait(due - now);
        }
        let n = self.tick();
        self.flush();
        n
    }

    /// Handles commands for up to `seconds` of clock time (one poll slice
    /// in real time, the whole span at once in simulated time).
    fn wait(&mut self, seconds: f64) {
        if self.clock.is_realtime() {
            self.command_window(Duration::from_secs_f64(seconds).min(POLL_SLICE));
        } else {
            self.command_window(Duration::ZERO);
            self.clock.sleep(seconds);
        }
    }

    /// Runs until `stop` is set or `limit` readings have been emitted, then
    /// delivers whatever is still buffered.
    pub fn run(&mut self, stop: &AtomicBool, limit: Option<u32>) -> NodeStats {
        self.handshake();
        self.tick();
        while !stop.load(Ordering::Relaxed) {
            if limit.is_some_and(|l| self.state.seq_next() >= l) {
                break;
            }
            self.step(stop);
        }
        self.shutdown();
        self.stats
    }

    /// Final delivery attempt: one handshake if the link is down, then flush.
    pub fn shutdown(&mut self) -> usize {
        if !self.link_up {
            self.next_sync_at = f64::NEG_INFINITY;
        }
        let sent = self.flush();
        // Acks for commands that arrived during the last wait.
        self.command_window(Duration::ZERO);
        sent
    }
}
