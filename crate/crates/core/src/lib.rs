//! Core of the YoMo smart-meter simulator.
//!
//! [`waveform`] and [`powercalc`] are generic over the scalar type through
//! [`Real`]; the `*64` / `*32` aliases below fix it. The meter emulation in
//! [`monitor`] and the wire format in [`protocol`] work in `f64`.

// `!(x >= y)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod fixtures;
pub mod meter_id;
pub mod monitor;
pub mod powercalc;
pub mod protocol;
pub mod scalar;
pub mod waveform;

pub use meter_id::MeterId;
pub use monitor::{Command, CommandEnvelope, CommandOutcome, MeterConfig, MeterState, PowerReading};
pub use powercalc::{
    crest_rms, phase_shift, power_triplet, rms, validate_sampling_frequency, EnergyAccumulator,
    PowerError, PowerTriplet, SamplingFrequencyError,
};
pub use scalar::Real;
pub use waveform::{relay_gate, synthesize, ApplianceProfile, WaveformError, WaveformFrame};

pub type ApplianceProfile64 = ApplianceProfile<f64>;
pub type ApplianceProfile32 = ApplianceProfile<f32>;
pub type WaveformFrame64 = WaveformFrame<f64>;
pub type WaveformFrame32 = WaveformFrame<f32>;
pub type PowerTriplet64 = PowerTriplet<f64>;
pub type PowerTriplet32 = PowerTriplet<f32>;
pub type EnergyAccumulator64 = EnergyAccumulator<f64>;
pub type EnergyAccumulator32 = EnergyAccumulator<f32>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Waveform(#[from] WaveformError),
    #[error(transparent)]
    Power(#[from] PowerError),
    #[error(transparent)]
    SamplingFrequency(#[from] SamplingFrequencyError),
    #[error("configuration error: {0}")]
    Config(String),
}
