//! Per-meter append-only reading logs.
//!
//! Layout under the data directory:
//!
//! ```text
//! meters.idx                  one "<storage_id> <meter_id hex>" line per meter
//! <storage_id>/readings.log   one JSON record per line, in arrival order
//! ```
//!
//! Records hold the wire's integer milli-units so that reloading is exact.
//! The in-memory view orders each meter's readings by sequence number.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use yomo_core::protocol::MeasurementPayload;
use yomo_core::{MeterId, PowerReading};

pub const INDEX_FILE: &str = "meters.idx";
pub const LOG_FILE: &str = "readings.log";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("corrupt index line {line} in {path}")]
    CorruptIndex { path: PathBuf, line: usize },
    #[error("unknown meter `{0}`")]
    UnknownMeter(String),
    #[error("query window is inverted (from {from} > to {to})")]
    InvertedWindow { from: u64, to: u64 },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Identifier the coordinator assigns to a meter on first contact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StorageId(pub u32);

impl fmt::Display for StorageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{:06}", self.0)
    }
}

impl FromStr for StorageId {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.strip_prefix('m')
            .filter(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
            .and_then(|d| d.parse().ok())
            .map(StorageId)
            .ok_or(())
    }
}

impl Serialize for StorageId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// One line of `readings.log`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub meter_id: MeterId,
    pub seq: u32,
    pub timestamp_ms: u64,
    pub v_rms_mv: u32,
    pub i_rms_ma: u32,
    pub phi_urad: i32,
    pub p_mw: i32,
    pub q_mvar: i32,
    pub s_mva: u32,
    pub energy_mj: u64,
    pub relay_closed: bool,
    pub sleeping: bool,
}

impl LogRecord {
    pub fn new(meter_id: MeterId, m: &MeasurementPayload) -> Self {
        Self {
            meter_id,
            seq: m.seq,
            timestamp_ms: m.timestamp_ms,
            v_rms_mv: m.v_rms_mv,
            i_rms_ma: m.i_rms_ma,
            phi_urad: m.phi_urad,
            p_mw: m.p_mw,
            q_mvar: m.q_mvar,
            s_mva: m.s_mva,
            energy_mj: m.energy_mj,
            relay_closed: m.relay_closed,
            sleeping: m.sleeping,
        }
    }

    pub fn payload(&self) -> MeasurementPayload {
        MeasurementPayload {
            seq: self.seq,
            timestamp_ms: self.timestamp_ms,
            v_rms_mv: self.v_rms_mv,
            i_rms_ma: self.i_rms_ma,
            phi_urad: self.phi_urad,
            p_mw: self.p_mw,
            q_mvar: self.q_mvar,
            s_mva: self.s_mva,
            energy_mj: self.energy_mj,
            relay_closed: self.relay_closed,
            sleeping: self.sleeping,
        }
    }

    pub fn reading(&self) -> PowerReading {
        self.payload().to_reading(self.meter_id)
    }
}

/// Summary of a meter as exposed by the API.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeterRecord {
    pub storage_id: StorageId,
    pub wire_meter_id: MeterId,
    /// Coordinator wall clock at the last datagram, ms since the Unix epoch.
    /// `None` until the meter is heard from in this process lifetime.
    pub last_seen: Option<u64>,
    pub last_seq: Option<u32>,
    /// Number of forward jumps in the sequence (one per gap event).
    pub gap_count: u64,
    /// Sequence numbers skipped over by those jumps.
    pub missing: u64,
    pub duplicates: u64,
    pub reading_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    Stored {
        storage_id: StorageId,
        new_meter: bool,
        /// Sequence numbers skipped immediately before this reading.
        skipped: u32,
    },
    Duplicate {
        storage_id: StorageId,
    },
}

struct MeterLog {
    record: MeterRecord,
    readings: BTreeMap<u32, LogRecord>,
    file: File,
    last_addr: Option<SocketAddr>,
}

impl MeterLog {
    /// Applies an accepted reading to the sequence bookkeeping.
    fn track(&mut self, seq: u32) -> u32 {
        let skipped = match self.record.last_seq {
            Some(last) if seq > last.wrapping_add(1) && seq > last => seq - last - 1,
            _ => 0,
        };
        if skipped > 0 {
            self.record.gap_count += 1;
            self.record.missing += u64::from(skipped);
        }
        self.record.last_seq = Some(self.record.last_seq.map_or(seq, |l| l.max(seq)));
        self.record.reading_count = self.readings.len();
        skipped
    }
}

/// A page of a meter's series.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesPage {
    pub readings: Vec<PowerReading>,
    /// Pass as `after` to fetch the next page; `None` when exhausted.
    pub next: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeriesQuery {
    pub from_ms: u64,
    pub to_ms: u64,
    pub max: usize,
    /// Only readings with a sequence number strictly above this.
    pub after: Option<u32>,
}

impl Default for SeriesQuery {
    fn default() -> Self {
        Self {
            from_ms: 0,
            to_ms: u64::MAX,
            max: 1000,
            after: None,
        }
    }
}

struct Index {
    by_wire: HashMap<MeterId, StorageId>,
    file: File,
    next: u32,
}

pub struct Store {
    dir: PathBuf,
    index: Mutex<Index>,
    meters: RwLock<HashMap<StorageId, Arc<Mutex<MeterLog>>>>,
}

impl Store {
    /// Opens (or creates) a store, replaying any existing logs.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let idx_path = dir.join(INDEX_FILE);

        let mut by_wire = HashMap::new();
        let mut meters = HashMap::new();
        let mut next = 1;
        if idx_path.exists() {
            let text = fs::read_to_string(&idx_path).map_err(io_err(&idx_path))?;
            for (n, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let corrupt = || StoreError::CorruptIndex {
                    path: idx_path.clone(),
                    line: n + 1,
                };
                let (sid, wire) = line.split_once(' ').ok_or_else(corrupt)?;
                let sid: StorageId = sid.parse().map_err(|_| corrupt())?;
                let wire: MeterId = wire.trim().parse().map_err(|_| corrupt())?;
                next = next.max(sid.0 + 1);
                by_wire.insert(wire, sid);
                let log = Self::load_log(&dir, sid, wire)?;
                meters.insert(sid, Arc::new(Mutex::new(log)));
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&idx_path)
            .map_err(io_err(&idx_path))?;
        Ok(Self {
            dir,
            index: Mutex::new(Index {
                by_wire,
                file,
                next,
            }),
            meters: RwLock::new(meters),
        })
    }

    fn log_path(dir: &Path, sid: StorageId) -> PathBuf {
        dir.join(sid.to_string()).join(LOG_FILE)
    }

    fn load_log(dir: &Path, sid: StorageId, wire: MeterId) -> Result<MeterLog, StoreError> {
        let path = Self::log_path(dir, sid);
        fs::create_dir_all(path.parent().expect("log has a parent")).map_err(io_err(&path))?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .read(true)
            .open(&path)
            .map_err(io_err(&path))?;
        let mut log = MeterLog {
            record: MeterRecord {
                storage_id: sid,
                wire_meter_id: wire,
                last_seen: None,
                last_seq: None,
                gap_count: 0,
                missing: 0,
                duplicates: 0,
                reading_count: 0,
            },
            readings: BTreeMap::new(),
            file,
            last_addr: None,
        };
        let reader = BufReader::new(File::open(&path).map_err(io_err(&path))?);
        for line in reader.lines() {
            let line = line.map_err(io_err(&path))?;
            // A torn final line from a crash mid-write is skipped.
            let Ok(rec) = serde_json::from_str::<LogRecord>(&line) else {
                tracing::warn!(path = %path.display(), "skipping unparsable log line");
                continue;
            };
            if log.readings.insert(rec.seq, rec).is_none() {
                log.track(rec.seq);
            }
        }
        Ok(log)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Storage id for `wire`, allocating and persisting one on first contact.
    fn resolve_or_create(&self, wire: MeterId) -> Result<(StorageId, bool), StoreError> {
        let mut index = self.index.lock().expect("index lock");
        if let Some(&sid) = index.by_wire.get(&wire) {
            return Ok((sid, false));
        }
        let sid = StorageId(index.next);
        let log = Self::load_log(&self.dir, sid, wire)?;
        let idx_path = self.dir.join(INDEX_FILE);
        writeln!(index.file, "{sid} {wire}").map_err(io_err(&idx_path))?;
        index.file.flush().map_err(io_err(&idx_path))?;
        index.next += 1;
        index.by_wire.insert(wire, sid);
        self.meters
            .write()
            .expect("meters lock")
            .insert(sid, Arc::new(Mutex::new(log)));
        Ok((sid, true))
    }

    fn log(&self, sid: StorageId) -> Option<Arc<Mutex<MeterLog>>> {
        self.meters.read().expect("meters lock").get(&sid).cloned()
    }

    /// Resolves either a storage id (`m000001`) or a wire meter id.
    pub fn lookup(&self, key: &str) -> Option<StorageId> {
        if let Ok(sid) = key.parse::<StorageId>() {
            return self.log(sid).map(|_| sid);
        }
        let wire: MeterId = key.parse().ok()?;
        self.index
            .lock()
            .expect("index lock")
            .by_wire
            .get(&wire)
            .copied()
    }

    /// Marks a meter as heard from, creating it if new.
    pub fn touch(
        &self,
        wire: MeterId,
        source: SocketAddr,
        now_ms: u64,
    ) -> Result<(StorageId, bool), StoreError> {
        let (sid, new_meter) = self.resolve_or_create(wire)?;
        let log = self.log(sid).expect("meter was just resolved");
        let mut log = log.lock().expect("meter lock");
        log.record.last_seen = Some(now_ms);
        log.last_addr = Some(source);
        Ok((sid, new_meter))
    }

    /// Stores a measurement unless its sequence number is already present.
    pub fn insert(
        &self,
        wire: MeterId,
        payload: &MeasurementPayload,
        source: SocketAddr,
        now_ms: u64,
    ) -> Result<InsertOutcome, StoreError> {
        let (sid, new_meter) = self.touch(wire, source, now_ms)?;
        let log = self.log(sid).expect("meter was just resolved");
        let mut log = log.lock().expect("meter lock");
        if log.readings.contains_key(&payload.seq) {
            log.record.duplicates += 1;
            return Ok(InsertOutcome::Duplicate { storage_id: sid });
        }
        let rec = LogRecord::new(wire, payload);
        let mut line = serde_json::to_string(&rec).expect("record serializes");
        line.push('\n');
        let path = Self::log_path(&self.dir, sid);
        log.file
            .write_all(line.as_bytes())
            .map_err(io_err(&path))?;
        log.readings.insert(rec.seq, rec);
        let skipped = log.track(rec.seq);
        Ok(InsertOutcome::Stored {
            storage_id: sid,
            new_meter,
            skipped,
        })
    }

    pub fn meters(&self) -> Vec<MeterRecord> {
        let logs: Vec<_> = self.meters.read().expect("meters lock").values().cloned().collect();
        let mut out: Vec<MeterRecord> = logs
            .iter()
            .map(|l| l.lock().expect("meter lock").record.clone())
            .collect();
        out.sort_by_key(|r| r.storage_id);
        out
    }

    pub fn record(&self, sid: StorageId) -> Option<MeterRecord> {
        self.log(sid).map(|l| l.lock().expect("meter lock").record.clone())
    }

    pub fn last_reading(&self, sid: StorageId) -> Option<PowerReading> {
        let log = self.log(sid)?;
        let log = log.lock().expect("meter lock");
        log.readings.values().next_back().map(LogRecord::reading)
    }

    pub fn last_addr(&self, sid: StorageId) -> Option<SocketAddr> {
        self.log(sid)?.lock().expect("meter lock").last_addr
    }

    pub fn total_readings(&self) -> usize {
        self.meters().iter().map(|m| m.reading_count).sum()
    }

    pub fn query_series(&self, sid: StorageId, q: SeriesQuery) -> Result<SeriesPage, StoreError> {
        if q.from_ms > q.to_ms {
            return Err(StoreError::InvertedWindow {
                from: q.from_ms,
                to: q.to_ms,
            });
        }
        let log = self
            .log(sid)
            .ok_or_else(|| StoreError::UnknownMeter(sid.to_string()))?;
        let log = log.lock().expect("meter lock");
        let lower = match q.after {
            Some(after) => std::ops::Bound::Excluded(after),
            None => std::ops::Bound::Unbounded,
        };
        let mut matching = log
            .readings
            .range((lower, std::ops::Bound::Unbounded))
            .map(|(_, r)| r)
            .filter(|r| q.from_ms <= r.timestamp_ms && r.timestamp_ms < q.to_ms);
        let readings: Vec<PowerReading> = matching.by_ref().take(q.max).map(LogRecord::reading).collect();
        let next = match (readings.last(), matching.next()) {
            (Some(last), Some(_)) => Some(last.seq),
            _ => None,
        };
        Ok(SeriesPage { readings, next })
    }

    /// Raw records of one meter in sequence order.
    pub fn records(&self, sid: StorageId) -> Vec<LogRecord> {
        self.log(sid)
            .map(|l| l.lock().expect("meter lock").readings.values().copied().collect())
            .unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn payload(seq: u32, ts: u64) -> MeasurementPayload {
        MeasurementPayload {
            seq,
            timestamp_ms: ts,
            v_rms_mv: 230_000,
            i_rms_ma: 8_435,
            phi_urad: 101_578,
            p_mw: 1_930_000,
            q_mvar: 196_750,
            s_mva: 1_940_000,
            energy_mj: u64::from(seq) * 386_000,
            relay_closed: true,
            sleeping: false,
        }
    }

    fn src() -> SocketAddr {
        "127.0.0.1:9999".parse().unwrap()
    }

    #[test]
    fn storage_id_format() {
        assert_eq!(StorageId(7).to_string(), "m000007");
        assert_eq!("m000007".parse::<StorageId>(), Ok(StorageId(7)));
        assert!("x1".parse::<StorageId>().is_err());
        assert!("m".parse::<StorageId>().is_err());
    }

    #[test]
    fn first_contact_dedup_and_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let id = MeterId::from_u64(1);
        let out = store.insert(id, &payload(5, 100), src(), 1).unwrap();
        assert!(matches!(out, InsertOutcome::Stored { new_meter: true, skipped: 0, .. }));
        let out = store.insert(id, &payload(5, 100), src(), 2).unwrap();
        assert!(matches!(out, InsertOutcome::Duplicate { .. }));
        let out = store.insert(id, &payload(8, 400), src(), 3).unwrap();
        assert!(matches!(out, InsertOutcome::Stored { skipped: 2, .. }));
        // Late arrival fills part of the gap without a new gap event.
        store.insert(id, &payload(6, 200), src(), 4).unwrap();
        let rec = &store.meters()[0];
        assert_eq!(rec.gap_count, 1);
        assert_eq!(rec.missing, 2);
        assert_eq!(rec.duplicates, 1);
        assert_eq!(rec.reading_count, 3);
        assert_eq!(rec.last_seq, Some(8));
        assert_eq!(rec.last_seen, Some(4));
        let seqs: Vec<u32> = store.records(rec.storage_id).iter().map(|r| r.seq).collect();
        assert_eq!(seqs, vec![5, 6, 8]);
    }

    #[test]
    fn queries_and_pages() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        for m in 1..=3u64 {
            for seq in 0..100 {
                store
                    .insert(MeterId::from_u64(m), &payload(seq, 1000 + u64::from(seq) * 200), src(), 0)
                    .unwrap();
            }
        }
        let sid = store.lookup(&MeterId::from_u64(2).to_string()).unwrap();
        let all = store
            .query_series(sid, SeriesQuery { max: usize::MAX, ..Default::default() })
            .unwrap();
        assert_eq!(all.readings.len(), 100);
        assert!(all.readings.iter().all(|r| r.meter_id == MeterId::from_u64(2)));
        assert_eq!(all.next, None);

        let page = store
            .query_series(sid, SeriesQuery { max: 30, ..Default::default() })
            .unwrap();
        assert_eq!(page.readings.len(), 30);
        assert_eq!(page.next, Some(29));
        let rest = store
            .query_series(sid, SeriesQuery { max: 100, after: page.next, ..Default::default() })
            .unwrap();
        assert_eq!(rest.readings.first().unwrap().seq, 30);
        assert_eq!(rest.readings.len(), 70);

        let window = store
            .query_series(sid, SeriesQuery { from_ms: 1000, to_ms: 2000, ..Default::default() })
            .unwrap();
        assert_eq!(window.readings.len(), 5);

        let empty = store
            .query_series(sid, SeriesQuery { from_ms: 0, to_ms: 1000, ..Default::default() })
            .unwrap();
        assert!(empty.readings.is_empty());
        assert_eq!(empty.next, None);

        assert!(matches!(
            store.query_series(sid, SeriesQuery { from_ms: 5, to_ms: 4, ..Default::default() }),
            Err(StoreError::InvertedWindow { .. })
        ));
        assert!(matches!(
            store.query_series(StorageId(99), SeriesQuery::default()),
            Err(StoreError::UnknownMeter(_))
        ));
    }

    #[test]
    fn reopen_restores_everything() {
        let dir = tempfile::tempdir().unwrap();
        let id = MeterId::from_u64(9);
        let before = {
            let store = Store::open(dir.path()).unwrap();
            for seq in [0, 1, 2, 5, 3] {
                store.insert(id, &payload(seq, u64::from(seq)), src(), 0).unwrap();
            }
            let sid = store.lookup(&id.to_string()).unwrap();
            (sid, store.query_series(sid, SeriesQuery::default()).unwrap(), store.record(sid).unwrap())
        };
        // Simulate a torn final write.
        let log = dir.path().join(before.0.to_string()).join(LOG_FILE);
        OpenOptions::new().append(true).open(&log).unwrap().write_all(b"{\"meter_id\":").unwrap();

        let store = Store::open(dir.path()).unwrap();
        let sid = store.lookup(&id.to_string()).unwrap();
        assert_eq!(sid, before.0);
        assert_eq!(store.query_series(sid, SeriesQuery::default()).unwrap(), before.1);
        let rec = store.record(sid).unwrap();
        assert_eq!((rec.gap_count, rec.missing, rec.last_seq), (before.2.gap_count, before.2.missing, before.2.last_seq));
        // New meters continue the id sequence.
        store.insert(MeterId::from_u64(10), &payload(0, 0), src(), 0).unwrap();
        assert_eq!(store.lookup(&MeterId::from_u64(10).to_string()), Some(StorageId(2)));
        assert!(dir.path().join("m000002").join(LOG_FILE).exists());
    }
}
