//! Transport-independent coordinator logic: ingest, counters, command tickets.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use thiserror::Error;
use tokio::sync::Notify;
use yomo_core::monitor::CommandEnvelope;
use yomo_core::powercalc::SamplingLimits;
use yomo_core::protocol::{decode, encode, AckStatus, Body, Datagram, ErrorClass};
use yomo_core::{Command, MeterId};

use crate::store::{InsertOutcome, StorageId, Store, StoreError};

/// Milliseconds since the Unix epoch.
pub fn wall_clock_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// Source of coordinator time in ms. Swappable for tests.
pub type ClockFn = Arc<dyn Fn() -> u64 + Send + Sync>;

#[derive(Debug, Default)]
struct Counters {
    ingested: AtomicU64,
    stored: AtomicU64,
    duplicates: AtomicU64,
    gaps: AtomicU64,
    missing: AtomicU64,
    acks: AtomicU64,
    unmatched_acks: AtomicU64,
    time_syncs: AtomicU64,
    ignored: AtomicU64,
    store_errors: AtomicU64,
    queue_overflow: AtomicU64,
    dropped: [AtomicU64; ErrorClass::ALL.len()],
}

/// Snapshot served by `/api/health`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Health {
    pub status: &'static str,
    /// Datagrams that decoded successfully.
    pub ingested: u64,
    pub stored: u64,
    pub duplicates: u64,
    /// Gap events across all meters since start-up.
    pub gaps: u64,
    /// Sequence numbers skipped by those gaps.
    pub missing: u64,
    pub acks: u64,
    pub unmatched_acks: u64,
    pub time_syncs: u64,
    /// Valid datagrams of a kind the coordinator does not accept.
    pub ignored: u64,
    pub store_errors: u64,
    pub queue_overflow: u64,
    pub crc_errors: u64,
    pub dropped: u64,
    pub dropped_by_class: HashMap<&'static str, u64>,
    pub meters: usize,
    pub readings: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TicketState {
    Pending,
    Acked,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommandTicket {
    pub command_id: u32,
    pub storage_id: StorageId,
    pub meter_id: MeterId,
    pub command: Command,
    pub state: TicketState,
    pub attempts: u32,
    /// The meter's verdict once acked.
    pub ack: Option<AckStatus>,
    pub created_ms: u64,
    pub updated_ms: u64,
}

struct TicketEntry {
    ticket: CommandTicket,
    acked: Arc<Notify>,
}

#[derive(Debug, Error, PartialEq)]
pub enum DispatchError {
    #[error("unknown meter `{0}`")]
    NotFound(String),
    #[error("meter {storage_id} last seen {silent_ms} ms ago, beyond the {liveness_ms} ms liveness window")]
    Stale {
        storage_id: StorageId,
        silent_ms: u64,
        liveness_ms: u64,
    },
    #[error("invalid command: {0}")]
    Invalid(String),
}

/// Everything needed to transmit a freshly issued command.
#[derive(Debug, Clone)]
pub struct Dispatch {
    pub ticket: CommandTicket,
    pub target: SocketAddr,
    pub datagram: Vec<u8>,
    pub acked: Arc<Notify>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IngestOutcome {
    Stored {
        storage_id: StorageId,
        new_meter: bool,
        skipped: u32,
    },
    Duplicate {
        storage_id: StorageId,
    },
    /// An ack; `resolved` is false when no pending ticket matched.
    Ack { command_id: u32, resolved: bool },
    /// A time-sync request; the encoded reply goes back to the source.
    Reply(Vec<u8>),
    Ignored,
    Dropped(ErrorClass),
    StoreFailed,
}

pub struct Coordinator {
    store: Store,
    counters: Counters,
    tickets: Mutex<HashMap<u32, TicketEntry>>,
    next_command_id: AtomicU32,
    liveness_ms: u64,
    limits: SamplingLimits,
    clock: ClockFn,
}

impl Coordinator {
    pub fn open(store: Store, liveness: Duration) -> Self {
        Self::with_clock(store, liveness, Arc::new(wall_clock_ms))
    }

    pub fn with_clock(store: Store, liveness: Duration, clock: ClockFn) -> Self {
        Self {
            store,
            counters: Counters::default(),
            tickets: Mutex::new(HashMap::new()),
            next_command_id: AtomicU32::new(1),
            liveness_ms: liveness.as_millis() as u64,
            limits: SamplingLimits::default(),
            clock,
        }
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn now_ms(&self) -> u64 {
        (self.clock)()
    }

    pub fn count_overflow(&self) {
        self.counters.queue_overflow.fetch_add(1, Ordering::Relaxed);
    }

    /// Decodes and handles one datagram. Never panics on hostile input.
    pub fn ingest(&self, bytes: &[u8], source: SocketAddr) -> IngestOutcome {
        let c = &self.counters;
        let datagram = match decode(bytes) {
            Ok(d) => d,
            Err(e) => {
                let class = e.class();
                let slot = ErrorClass::ALL.iter().position(|&k| k == class).expect("listed");
                c.dropped[slot].fetch_add(1, Ordering::Relaxed);
                tracing::debug!(%source, error = %e, "dropped datagram");
                return IngestOutcome::Dropped(class);
            }
        };
        c.ingested.fetch_add(1, Ordering::Relaxed);
        let now = self.now_ms();
        match datagram.body {
            Body::Measurement(m) => match self.store.insert(datagram.meter_id, &m, source, now) {
                Ok(InsertOutcome::Stored {
                    storage_id,
                    new_meter,
                    skipped,
                }) => {
                    c.stored.fetch_add(1, Ordering::Relaxed);
                    if skipped > 0 {
                        c.gaps.fetch_add(1, Ordering::Relaxed);
                        c.missing.fetch_add(u64::from(skipped), Ordering::Relaxed);
                    }
                    if new_meter {
                        tracing::info!(%storage_id, meter = %datagram.meter_id, "new meter");
                    }
                    IngestOutcome::Stored {
                        storage_id,
                        new_meter,
                        skipped,
                    }
                }
                Ok(InsertOutcome::Duplicate { storage_id }) => {
                    c.duplicates.fetch_add(1, Ordering::Relaxed);
                    IngestOutcome::Duplicate { storage_id }
                }
                Err(e) => {
                    c.store_errors.fetch_add(1, Ordering::Relaxed);
                    tracing::error!(error = %e, "failed to persist reading");
                    IngestOutcome::StoreFailed
                }
            },
            Body::Ack(ack) => {
                c.acks.fetch_add(1, Ordering::Relaxed);
                if let Err(e) = self.store.touch(datagram.meter_id, source, now) {
                    tracing::error!(error = %e, "failed to register meter");
                }
                let resolved = self.resolve_ack(datagram.meter_id, ack.command_id, ack.status, now);
                if !resolved {
                    c.unmatched_acks.fetch_add(1, Ordering::Relaxed);
                }
                IngestOutcome::Ack {
                    command_id: ack.command_id,
                    resolved,
                }
            }
            Body::TimeSyncRequest { request_sent_ms } => {
                c.time_syncs.fetch_add(1, Ordering::Relaxed);
                if let Err(e) = self.store.touch(datagram.meter_id, source, now) {
                    tracing::error!(error = %e, "failed to register meter");
                }
                IngestOutcome::Reply(encode(&Datagram {
                    meter_id: datagram.meter_id,
                    body: Body::TimeSyncReply {
                        request_sent_ms,
                        coordinator_time_ms: now,
                    },
                }))
            }
            Body::Command(_) | Body::TimeSyncReply { .. } => {
                c.ignored.fetch_add(1, Ordering::Relaxed);
                IngestOutcome::Ignored
            }
        }
    }

    fn resolve_ack(&self, meter: MeterId, command_id: u32, status: AckStatus, now: u64) -> bool {
        let mut tickets = self.tickets.lock().expect("tickets lock");
        match tickets.get_mut(&command_id) {
            Some(entry)
                if entry.ticket.meter_id == meter && entry.ticket.state != TicketState::Acked =>
            {
                // A late ack still settles a ticket already marked failed:
                // the meter did apply the command.
                entry.ticket.state = TicketState::Acked;
                entry.ticket.ack = Some(status);
                entry.ticket.updated_ms = now;
                entry.acked.notify_one();
                true
            }
            _ => false,
        }
    }

    /// Validates a command and opens a pending ticket for it.
    pub fn dispatch(&self, meter_key: &str, command: Command) -> Result<Dispatch, DispatchError> {
        if let Command::SetFs(f) = command {
            self.limits
                .validate(f)
                .map_err(|e| DispatchError::Invalid(e.to_string()))?;
        }
        let storage_id = self
            .store
            .lookup(meter_key)
            .ok_or_else(|| DispatchError::NotFound(meter_key.to_string()))?;
        let record = self.store.record(storage_id).expect("looked-up meter exists");
        let now = self.now_ms();
        let stale = |silent_ms| DispatchError::Stale {
            storage_id,
            silent_ms,
            liveness_ms: self.liveness_ms,
        };
        let silent_ms = match record.last_seen {
            Some(seen) => now.saturating_sub(seen),
            None => return Err(stale(u64::MAX)),
        };
        if silent_ms > self.liveness_ms {
            return Err(stale(silent_ms));
        }
        let target = self.store.last_addr(storage_id).ok_or_else(|| stale(u64::MAX))?;

        let command_id = self.next_command_id.fetch_add(1, Ordering::Relaxed);
        let datagram = Datagram::command(record.wire_meter_id, CommandEnvelope { command_id, command })
            .map_err(|e| DispatchError::Invalid(e.to_string()))?;
        let ticket = CommandTicket {
            command_id,
            storage_id,
            meter_id: record.wire_meter_id,
            command,
            state: TicketState::Pending,
            attempts: 0,
            ack: None,
            created_ms: now,
            updated_ms: now,
        };
        let acked = Arc::new(Notify::new());
        self.tickets.lock().expect("tickets lock").insert(
            command_id,
            TicketEntry {
                ticket: ticket.clone(),
                acked: acked.clone(),
            },
        );
        Ok(Dispatch {
            ticket,
            target,
            datagram: encode(&datagram),
            acked,
        })
    }

    /// Records a transmission. Returns false if the ticket is already
    /// settled and nothing should be sent.
    pub fn begin_attempt(&self, command_id: u32) -> bool {
        let mut tickets = self.tickets.lock().expect("tickets lock");
        let Some(entry) = tickets.get_mut(&command_id) else {
            return false;
        };
        if entry.ticket.state != TicketState::Pending {
            return false;
        }
        entry.ticket.attempts += 1;
        entry.ticket.updated_ms = (self.clock)();
        true
    }

    /// Marks a still-pending ticket as failed.
    pub fn fail(&self, command_id: u32) {
        let mut tickets = self.tickets.lock().expect("tickets lock");
        if let Some(entry) = tickets.get_mut(&command_id) {
            if entry.ticket.state == TicketState::Pending {
                entry.ticket.state = TicketState::Failed;
                entry.ticket.updated_ms = (self.clock)();
            }
        }
    }

    pub fn ticket(&self, command_id: u32) -> Option<CommandTicket> {
        self.tickets
            .lock()
            .expect("tickets lock")
            .get(&command_id)
            .map(|e| e.ticket.clone())
    }

    pub fn health(&self) -> Health {
        let c = &self.counters;
        let load = |a: &AtomicU64| a.load(Ordering::Relaxed);
        let dropped_by_class: HashMap<_, _> = ErrorClass::ALL
            .iter()
            .zip(&c.dropped)
            .map(|(k, n)| (k.as_str(), load(n)))
            .collect();
        let meters = self.store.meters();
        Health {
            status: "ok",
            ingested: load(&c.ingested),
            stored: load(&c.stored),
            duplicates: load(&c.duplicates),
            gaps: load(&c.gaps),
            missing: load(&c.missing),
            acks: load(&c.acks),
            unmatched_acks: load(&c.unmatched_acks),
            time_syncs: load(&c.time_syncs),
            ignored: load(&c.ignored),
            store_errors: load(&c.store_errors),
            queue_overflow: load(&c.queue_overflow),
            crc_errors: dropped_by_class["crc_errors"],
            dropped: dropped_by_class.values().sum(),
            dropped_by_class,
            readings: meters.iter().map(|m| m.reading_count).sum(),
            meters: meters.len(),
        }
    }
}

impl From<StoreError> for DispatchError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::UnknownMeter(m) => DispatchError::NotFound(m),
            other => DispatchError::Invalid(other.to_string()),
        }
    }
}
