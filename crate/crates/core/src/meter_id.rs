use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Eight-byte meter identifier carried in every datagram.
///
/// Parses from 16 hex digits or from an ASCII name of up to 8 bytes
/// (zero-padded on the right). Always displays as hex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct MeterId(pub [u8; 8]);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid meter id `{0}`: expected 16 hex digits or at most 8 ASCII bytes")]
pub struct MeterIdError(pub String);

impl MeterId {
    pub const fn new(bytes: [u8; 8]) -> Self {
        Self(bytes)
    }

    pub fn from_u64(id: u64) -> Self {
        Self(id.to_be_bytes())
    }

    pub fn as_bytes(&self) -> &[u8; 8] {
        &self.0
    }
}

impl fmt::Display for MeterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.iter().try_for_each(|b| write!(f, "{b:02x}"))
    }
}

impl FromStr for MeterId {
    type Err = MeterIdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 8];
        if s.len() == 16 && s.bytes().all(|b| b.is_ascii_hexdigit()) {
            for (slot, pair) in out.iter_mut().zip(s.as_bytes().chunks(2)) {
                let pair = std::str::from_utf8(pair).expect("ascii");
                *slot = u8::from_str_radix(pair, 16).expect("hex digit pair");
            }
            return Ok(Self(out));
        }
        if s.is_empty() || s.len() > 8 || !s.is_ascii() {
            return Err(MeterIdError(s.to_string()));
        }
        out[..s.len()].copy_from_slice(s.as_bytes());
        Ok(Self(out))
    }
}

impl Serialize for MeterId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MeterId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
