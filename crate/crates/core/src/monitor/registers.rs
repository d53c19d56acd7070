//! Fixed-point register file of the emulated energy-monitor IC.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const VRMS_FULL_SCALE: f64 = 400.0;
pub const IRMS_FULL_SCALE: f64 = 32.0;
/// LSB of the power registers in W, var or VA.
pub const POWER_LSB: f64 = 0.125;
/// LSB of the energy register in J.
pub const ENERGY_LSB: f64 = 1e-3;

pub const MODE_SLEEP: u8 = 0b01;
pub const MODE_RELAY_CLOSED: u8 = 0b10;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegisterError {
    #[error("unknown register address `{0}`")]
    UnknownAddress(String),
}

/// Register addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Register {
    Vrms = 0x01,
    Irms = 0x02,
    ActivePower = 0x03,
    ReactivePower = 0x04,
    ApparentPower = 0x05,
    Energy = 0x06,
    SamplingFreq = 0x07,
    Mode = 0x08,
}

impl Register {
    pub const ALL: [Register; 8] = [
        Register::Vrms,
        Register::Irms,
        Register::ActivePower,
        Register::ReactivePower,
        Register::ApparentPower,
        Register::Energy,
        Register::SamplingFreq,
        Register::Mode,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Register::Vrms => "VRMS",
            Register::Irms => "IRMS",
            Register::ActivePower => "P",
            Register::ReactivePower => "Q",
            Register::ApparentPower => "S",
            Register::Energy => "ENERGY",
            Register::SamplingFreq => "FS",
            Register::Mode => "MODE",
        }
    }

    pub fn format(self) -> FixedPoint {
        match self {
            Register::Vrms => FixedPoint::unsigned(24, VRMS_FULL_SCALE / 4096.0),
            Register::Irms => FixedPoint::unsigned(24, IRMS_FULL_SCALE / 4096.0),
            Register::ActivePower | Register::ReactivePower | Register::ApparentPower => {
                FixedPoint::signed(24, POWER_LSB)
            }
            Register::Energy => FixedPoint::unsigned(48, ENERGY_LSB),
            Register::SamplingFreq => FixedPoint::unsigned(16, 1.0),
            Register::Mode => FixedPoint::unsigned(8, 1.0),
        }
    }

    fn index(self) -> usize {
        self as usize - 1
    }
}

impl fmt::Display for Register {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl TryFrom<u8> for Register {
    type Error = RegisterError;

    fn try_from(addr: u8) -> Result<Self, Self::Error> {
        Register::ALL
            .into_iter()
            .find(|r| *r as u8 == addr)
            .ok_or_else(|| RegisterError::UnknownAddress(format!("{addr:#04x}")))
    }
}

impl FromStr for Register {
    type Err = RegisterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_uppercase();
        let key = key.strip_suffix("_REG").unwrap_or(&key);
        Register::ALL
            .into_iter()
            .find(|r| r.name() == key)
            .ok_or_else(|| RegisterError::UnknownAddress(s.to_string()))
    }
}

/// Two's-complement or unsigned fixed-point format of a register.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPoint {
    pub bits: u32,
    pub signed: bool,
    pub lsb: f64,
}

impl FixedPoint {
    const fn unsigned(bits: u32, lsb: f64) -> Self {
        Self {
            bits,
            signed: false,
            lsb,
        }
    }

    const fn signed(bits: u32, lsb: f64) -> Self {
        Self {
            bits,
            signed: true,
            lsb,
        }
    }

    pub fn min_code(&self) -> i64 {
        if self.signed {
            -(1i64 << (self.bits - 1))
        } else {
            0
        }
    }

    pub fn max_code(&self) -> i64 {
        if self.signed {
            (1i64 << (self.bits - 1)) - 1
        } else {
            (1i64 << self.bits) - 1
        }
    }

    /// Rounds to the nearest code, saturating at the field limits.
    pub fn encode(&self, value: f64) -> i64 {
        if value.is_nan() {
            return 0;
        }
        let code = (value / self.lsb).round();
        code.clamp(self.min_code() as f64, self.max_code() as f64) as i64
    }

    pub fn decode(&self, code: i64) -> f64 {
        code as f64 * self.lsb
    }

    /// Value on the representable grid nearest to `value`.
    pub fn quantize(&self, value: f64) -> f64 {
        self.decode(self.encode(value))
    }
}

/// Raw register code together with its engineering value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegisterValue {
    pub raw: i64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RegisterFile {
    codes: [i64; 8],
}

impl RegisterFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn write(&mut self, reg: Register, value: f64) {
        self.codes[reg.index()] = reg.format().encode(value);
    }

    pub fn write_raw(&mut self, reg: Register, raw: i64) {
        let fmt = reg.format();
        self.codes[reg.index()] = raw.clamp(fmt.min_code(), fmt.max_code());
    }

    pub fn raw(&self, reg: Register) -> i64 {
        self.codes[reg.index()]
    }

    pub fn value(&self, reg: Register) -> f64 {
        reg.format().decode(self.raw(reg))
    }

    pub fn read(&self, reg: Register) -> RegisterValue {
        RegisterValue {
            raw: self.raw(reg),
            value: self.value(reg),
        }
    }

    /// Reads by register name (`"VRMS"`, `"p_reg"`, ...).
    pub fn read_named(&self, address: &str) -> Result<RegisterValue, RegisterError> {
        Ok(self.read(address.parse()?))
    }

    /// Writes the energy register, never moving it backwards.
    pub fn write_energy(&mut self, energy_j: f64) {
        let code = Register::Energy.format().encode(energy_j);
        let slot = &mut self.codes[Register::Energy.index()];
        *slot = (*slot).max(code);
    }

    pub fn reset_energy(&mut self) {
        self.codes[Register::Energy.index()] = 0;
    }

    pub fn mode(&self) -> u8 {
        self.raw(Register::Mode) as u8
    }

    pub fn set_mode(&mut self, sleeping: bool, relay_closed: bool) {
        let mut mode = 0;
        if sleeping {
            mode |= MODE_SLEEP;
        }
        if relay_closed {
            mode |= MODE_RELAY_CLOSED;
        }
        self.write_raw(Register::Mode, mode as i64);
    }
}
