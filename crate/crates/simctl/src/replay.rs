//! Re-sends a stored reading log to a coordinator.

use std::io::{self, BufRead};

use yomo_coordinator::LogRecord;
use yomo_core::protocol::{encode, Body, Datagram};

use crate::clock::Clock;
use crate::transport::Transport;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReplayReport {
    pub sent: usize,
    /// Lines that did not parse as a reading record.
    pub skipped: usize,
}

/// Sends every record of `log` in file order. With `speed > 0` the gaps
/// between original timestamps are reproduced, divided by `speed`; with
/// `speed == 0` records go out as fast as possible.
pub fn replay<C: Clock, T: Transport>(
    log: impl BufRead,
    transport: &mut T,
    clock: &C,
    speed: f64,
) -> io::Result<ReplayReport> {
    if !(speed.is_finite() && speed >= 0.0) {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            format!("replay speed must be a finite non-negative number, got {speed}"),
        ));
    }
    let mut report = ReplayReport::default();
    let mut origin: Option<(u64, f64)> = None;
    for (n, line) in log.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: LogRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                tracing::warn!(line = n + 1, error = %e, "skipping malformed log line");
                report.skipped += 1;
                continue;
            }
        };
        if speed > 0.0 {
            let (t0, c0) = *origin.get_or_insert((record.timestamp_ms, clock.now()));
            let offset = record.timestamp_ms.saturating_sub(t0) as f64 / 1000.0 / speed;
            let wait = c0 + offset - clock.now();
            if wait > 0.0 {
                clock.sleep(wait);
            }
        }
        let datagram = encode(&Datagram {
            meter_id: record.meter_id,
            body: Body::Measurement(record.payload()),
        });
        transport.send(&datagram)?;
        report.sent += 1;
    }
    Ok(report)
}
