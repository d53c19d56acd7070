//! Datagram formats exchanged between meter nodes and the coordinator.
//!
//! Every datagram is
//!
//! ```text
//! "YM" | version u8 | kind u8 | meter_id [u8; 8] | payload | crc32 u32
//! ```
//!
//! with all integers big-endian and the CRC (IEEE) taken over every
//! preceding byte. Payloads by kind:
//!
//! ```text
//! 0x01 measurement   seq u32 | timestamp_ms u64 | v_rms mV u32 | i_rms mA u32
//!                    | phi urad i32 | p mW i32 | q mvar i32 | s mVA u32
//!                    | energy mJ u64 | flags u8 (bit0 relay closed, bit1 sleeping)
//! 0x02 command       opcode u8 | argument u32 (SET_FS: Hz x 10) | command_id u32
//! 0x03 ack           command_id u32 [| reject reason u8]
//! 0x04 sync request  request_sent_ms u64
//! 0x05 sync reply    request_sent_ms u64 | coordinator_time_ms u64
//! ```

mod codec;

pub use codec::{decode, encode};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::meter_id::MeterId;
use crate::monitor::{Command, CommandEnvelope, CommandOutcome, PowerReading};
use crate::powercalc::{PowerTriplet, SamplingFrequencyError};

pub const MAGIC: [u8; 2] = *b"YM";
pub const VERSION: u8 = 0x01;
pub const MAX_DATAGRAM_LEN: usize = 512;
/// Magic, version, kind and meter id.
pub const HEADER_LEN: usize = 12;
pub const CRC_LEN: usize = 4;
pub const MEASUREMENT_PAYLOAD_LEN: usize = 45;
pub const COMMAND_PAYLOAD_LEN: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Kind {
    Measurement = 0x01,
    Command = 0x02,
    Ack = 0x03,
    TimeSyncRequest = 0x04,
    TimeSyncReply = 0x05,
}

impl Kind {
    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0x01 => Kind::Measurement,
            0x02 => Kind::Command,
            0x03 => Kind::Ack,
            0x04 => Kind::TimeSyncRequest,
            0x05 => Kind::TimeSyncReply,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Opcode {
    SwitchOn = 0x01,
    SwitchOff = 0x02,
    Sleep = 0x03,
    Wake = 0x04,
    SetFs = 0x05,
}

impl Opcode {
    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0x01 => Opcode::SwitchOn,
            0x02 => Opcode::SwitchOff,
            0x03 => Opcode::Sleep,
            0x04 => Opcode::Wake,
            0x05 => Opcode::SetFs,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Datagram {
    pub meter_id: MeterId,
    pub body: Body,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Body {
    Measurement(MeasurementPayload),
    Command(CommandFrame),
    Ack(Ack),
    TimeSyncRequest {
        request_sent_ms: u64,
    },
    TimeSyncReply {
        request_sent_ms: u64,
        coordinator_time_ms: u64,
    },
}

impl Body {
    pub fn kind(&self) -> Kind {
        match self {
            Body::Measurement(_) => Kind::Measurement,
            Body::Command(_) => Kind::Command,
            Body::Ack(_) => Kind::Ack,
            Body::TimeSyncRequest { .. } => Kind::TimeSyncRequest,
            Body::TimeSyncReply { .. } => Kind::TimeSyncReply,
        }
    }
}

/// Measurement fields in wire units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeasurementPayload {
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommandFrame {
    pub opcode: Opcode,
    /// Zero unless `opcode` is `SetFs`, where it is the frequency in 0.1 Hz.
    pub argument: u32,
    pub command_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ack {
    pub command_id: u32,
    pub status: AckStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AckStatus {
    Accepted,
    Rejected(RejectReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum RejectReason {
    BelowNyquist = 0x01,
    AboveCeiling = 0x02,
}

impl RejectReason {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0x01 => Some(RejectReason::BelowNyquist),
            0x02 => Some(RejectReason::AboveCeiling),
            _ => None,
        }
    }
}

impl From<CommandOutcome> for AckStatus {
    fn from(outcome: CommandOutcome) -> Self {
        match outcome {
            CommandOutcome::Accepted => AckStatus::Accepted,
            CommandOutcome::Rejected(SamplingFrequencyError::BelowNyquist(_)) => {
                AckStatus::Rejected(RejectReason::BelowNyquist)
            }
            CommandOutcome::Rejected(SamplingFrequencyError::AboveCeiling { .. }) => {
                AckStatus::Rejected(RejectReason::AboveCeiling)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EncodeError {
    #[error("field `{field}` value {value} does not fit its wire width")]
    FieldRange { field: &'static str, value: f64 },
}

/// Decode failure classes. Each maps to a distinct [`ErrorClass`].
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("truncated datagram: need {needed} bytes, got {got}")]
    Truncated { needed: usize, got: usize },
    #[error("datagram of {0} bytes exceeds the {MAX_DATAGRAM_LEN}-byte limit")]
    Oversize(usize),
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 2]),
    #[error("unsupported protocol version {0:#04x}")]
    UnsupportedVersion(u8),
    #[error("crc mismatch: datagram carries {carried:#010x}, computed {computed:#010x}")]
    CrcMismatch { carried: u32, computed: u32 },
    #[error("unknown datagram kind {0:#04x}")]
    UnknownKind(u8),
    #[error("unknown command opcode {0:#04x}")]
    UnknownOpcode(u8),
    #[error("malformed payload: {0}")]
    Malformed(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    Truncated,
    Oversize,
    BadMagic,
    UnsupportedVersion,
    CrcErrors,
    UnknownKind,
    UnknownOpcode,
    Malformed,
}

impl ErrorClass {
    pub const ALL: [ErrorClass; 8] = [
        ErrorClass::Truncated,
        ErrorClass::Oversize,
        ErrorClass::BadMagic,
        ErrorClass::UnsupportedVersion,
        ErrorClass::CrcErrors,
        ErrorClass::UnknownKind,
        ErrorClass::UnknownOpcode,
        ErrorClass::Malformed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::Truncated => "truncated",
            ErrorClass::Oversize => "oversize",
            ErrorClass::BadMagic => "bad_magic",
            ErrorClass::UnsupportedVersion => "unsupported_version",
            ErrorClass::CrcErrors => "crc_errors",
            ErrorClass::UnknownKind => "unknown_kind",
            ErrorClass::UnknownOpcode => "unknown_opcode",
            ErrorClass::Malformed => "malformed",
        }
    }
}

impl DecodeError {
    pub fn class(&self) -> ErrorClass {
        match self {
            DecodeError::Truncated { .. } => ErrorClass::Truncated,
            DecodeError::Oversize(_) => ErrorClass::Oversize,
            DecodeError::BadMagic(_) => ErrorClass::BadMagic,
            DecodeError::UnsupportedVersion(_) => ErrorClass::UnsupportedVersion,
            DecodeError::CrcMismatch { .. } => ErrorClass::CrcErrors,
            DecodeError::UnknownKind(_) => ErrorClass::UnknownKind,
            DecodeError::UnknownOpcode(_) => ErrorClass::UnknownOpcode,
            DecodeError::Malformed(_) => ErrorClass::Malformed,
        }
    }
}

fn scaled<I>(field: &'static str, value: f64, scale: f64) -> Result<I, EncodeError>
where
    I: TryFrom<i64>,
{
    let x = (value * scale).round();
    if !x.is_finite() || x < i64::MIN as f64 || x > i64::MAX as f64 {
        return Err(EncodeError::FieldRange { field, value });
    }
    I::try_from(x as i64).map_err(|_| EncodeError::FieldRange { field, value })
}

impl MeasurementPayload {
    /// Converts a reading to milli-units, failing on the first field that
    /// does not fit its wire width.
    pub fn from_reading(reading: &PowerReading, sleeping: bool) -> Result<Self, EncodeError> {
        let t = &reading.triplet;
        Ok(Self {
            seq: reading.seq,
            timestamp_ms: reading.timestamp_ms,
            v_rms_mv: scaled("v_rms", reading.v_rms, 1e3)?,
            i_rms_ma: scaled("i_rms", reading.i_rms, 1e3)?,
            phi_urad: scaled("phi", reading.phi, 1e6)?,
            p_mw: scaled("p", t.active_p, 1e3)?,
            q_mvar: scaled("q", t.reactive_q, 1e3)?,
            s_mva: scaled("s", t.apparent_s, 1e3)?,
            energy_mj: {
                let mj: i64 = scaled("energy", reading.energy_j, 1e3)?;
                u64::try_from(mj).map_err(|_| EncodeError::FieldRange {
                    field: "energy",
                    value: reading.energy_j,
                })?
            },
            relay_closed: reading.relay_closed,
            sleeping,
        })
    }

    pub fn to_reading(&self, meter_id: MeterId) -> PowerReading {
        PowerReading {
            meter_id,
            seq: self.seq,
            timestamp_ms: self.timestamp_ms,
            v_rms: f64::from(self.v_rms_mv) / 1e3,
            i_rms: f64::from(self.i_rms_ma) / 1e3,
            phi: f64::from(self.phi_urad) / 1e6,
            triplet: PowerTriplet {
                active_p: f64::from(self.p_mw) / 1e3,
                reactive_q: f64::from(self.q_mvar) / 1e3,
                apparent_s: f64::from(self.s_mva) / 1e3,
            },
            energy_j: self.energy_mj as f64 / 1e3,
            relay_closed: self.relay_closed,
        }
    }
}

impl CommandFrame {
    pub fn from_envelope(env: CommandEnvelope) -> Result<Self, EncodeError> {
        let (opcode, argument) = match env.command {
            Command::SwitchOn => (Opcode::SwitchOn, 0),
            Command::SwitchOff => (Opcode::SwitchOff, 0),
            Command::Sleep => (Opcode::Sleep, 0),
            Command::Wake => (Opcode::Wake, 0),
            Command::SetFs(hz) => (Opcode::SetFs, scaled("set_fs", hz, 10.0)?),
        };
        Ok(Self {
            opcode,
            argument,
            command_id: env.command_id,
        })
    }

    pub fn to_envelope(&self) -> CommandEnvelope {
        let command = match self.opcode {
            Opcode::SwitchOn => Command::SwitchOn,
            Opcode::SwitchOff => Command::SwitchOff,
            Opcode::Sleep => Command::Sleep,
            Opcode::Wake => Command::Wake,
            Opcode::SetFs => Command::SetFs(f64::from(self.argument) / 10.0),
        };
        CommandEnvelope {
            command_id: self.command_id,
            command,
        }
    }
}

impl Datagram {
    pub fn measurement(reading: &PowerReading) -> Result<Self, EncodeError> {
        Ok(Self {
            meter_id: reading.meter_id,
            body: Body::Measurement(MeasurementPayload::from_reading(reading, false)?),
        })
    }

    pub fn command(meter_id: MeterId, env: CommandEnvelope) -> Result<Self, EncodeError> {
        Ok(Self {
            meter_id,
            body: Body::Command(CommandFrame::from_envelope(env)?),
        })
    }

    pub fn ack(meter_id: MeterId, command_id: u32, status: AckStatus) -> Self {
        Self {
            meter_id,
            body: Body::Ack(Ack { command_id, status }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("negative round trip: reply received at {reply_received} ms before request sent at {request_sent} ms")]
pub struct TimeSyncError {
    pub request_sent: u64,
    pub reply_received: u64,
}

/// Single-exchange clock offset estimate in milliseconds: add it to the
/// meter clock to obtain coordinator time.
pub fn time_sync(
    request_sent: u64,
    reply_received: u64,
    coordinator_time: u64,
) -> Result<f64, TimeSyncError> {
    if reply_received < request_sent {
        return Err(TimeSyncError {
            request_sent,
            reply_received,
        });
    }
    let rtt = (reply_received - request_sent) as f64;
    Ok(coordinator_time as f64 + rtt / 2.0 - reply_received as f64)
}
