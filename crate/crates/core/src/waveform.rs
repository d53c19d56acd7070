//! Appliance waveform synthesis.
//!
//! Stands in for the grid, the current transformer and the isolation
//! amplifier: a stiff sinusoidal voltage and a phase-shifted current whose
//! amplitude follows from the appliance's apparent power.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

pub const DEFAULT_U_RMS: f64 = 230.0;
pub const DEFAULT_MAINS_FREQ: f64 = 50.0;

/// Minimum number of samples per mains cycle accepted by [`synthesize`].
pub const MIN_SAMPLES_PER_CYCLE: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WaveformError {
    #[error("invalid appliance profile `{name}`: {reason}")]
    InvalidProfile { name: String, reason: &'static str },
    #[error("duration {duration} s is shorter than one mains cycle ({min} s)")]
    DurationTooShort { duration: f64, min: f64 },
    #[error("sample rate {sample_rate} Hz is below {min} Hz (4 x mains frequency)")]
    SampleRateTooLow { sample_rate: f64, min: f64 },
    #[error("frame needs equal-length voltage and current sequences of at least 2 samples (got {u} and {i})")]
    BadFrameLength { u: usize, i: usize },
    #[error("sample rate must be positive and finite, got {0}")]
    BadSampleRate(f64),
}

fn default_voltage<T: Real>() -> T {
    T::of(DEFAULT_U_RMS)
}

fn default_mains<T: Real>() -> T {
    T::of(DEFAULT_MAINS_FREQ)
}

fn default_gain<T: Real>() -> T {
    T::one()
}

/// Electrical description of a single-phase appliance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Real + Deserialize<'de>"))]
pub struct ApplianceProfile<T> {
    pub name: String,
    #[serde(default = "default_voltage")]
    pub u_rms_nominal: T,
    /// Active power in watts.
    pub p_active: T,
    /// Apparent power in volt-amperes.
    pub s_apparent: T,
    #[serde(default = "default_mains")]
    pub mains_freq: T,
    /// Standard deviation of additive current noise, as a fraction of the
    /// current amplitude.
    #[serde(default)]
    pub noise_stddev: T,
    #[serde(default = "default_gain")]
    pub gain_error: T,
}

impl<T: Real> ApplianceProfile<T> {
    /// A noise-free 230 V / 50 Hz profile.
    pub fn new(name: impl Into<String>, p_active: T, s_apparent: T) -> Self {
        Self {
            name: name.into(),
            u_rms_nominal: default_voltage(),
            p_active,
            s_apparent,
            mains_freq: default_mains(),
            noise_stddev: T::zero(),
            gain_error: T::one(),
        }
    }

    pub fn with_noise(mut self, noise_stddev: T) -> Self {
        self.noise_stddev = noise_stddev;
        self
    }

    pub fn with_mains_freq(mut self, mains_freq: T) -> Self {
        self.mains_freq = mains_freq;
        self
    }

    pub fn with_gain_error(mut self, gain_error: T) -> Self {
        self.gain_error = gain_error;
        self
    }

    pub fn with_voltage(mut self, u_rms_nominal: T) -> Self {
        self.u_rms_nominal = u_rms_nominal;
        self
    }

    pub fn validate(&self) -> Result<(), WaveformError> {
        let bad = |reason| {
            Err(WaveformError::InvalidProfile {
                name: self.name.clone(),
                reason,
            })
        };
        let finite = [
            self.u_rms_nominal,
            self.p_active,
            self.s_apparent,
            self.mains_freq,
            self.noise_stddev,
            self.gain_error,
        ]
        .iter()
        .all(|x| x.is_finite());
        if !finite {
            return bad("all quantities must be finite");
        }
        if self.u_rms_nominal <= T::zero() {
            return bad("nominal voltage must be positive");
        }
        if self.p_active < T::zero() {
            return bad("active power must be non-negative");
        }
        if self.s_apparent < self.p_active {
            return bad("apparent power must be at least the active power");
        }
        if self.mains_freq != T::of(50.0) && self.mains_freq != T::of(60.0) {
            return bad("mains frequency must be 50 or 60 Hz");
        }
        if self.noise_stddev < T::zero() {
            return bad("noise standard deviation must be non-negative");
        }
        Ok(())
    }

    /// Phase shift implied by the active/apparent pair, in `[0, pi/2]`.
    pub fn phi(&self) -> T {
        if self.s_apparent <= T::zero() {
            return T::zero();
        }
        (self.p_active / self.s_apparent).min(T::one()).acos()
    }

    /// Peak current before gain error, `sqrt(2) * S / U`.
    pub fn current_amplitude(&self) -> T {
        T::SQRT_2() * self.s_apparent / self.u_rms_nominal
    }

    pub fn voltage_amplitude(&self) -> T {
        T::SQRT_2() * self.u_rms_nominal
    }

    /// Reactive power consistent with the active/apparent pair.
    pub fn q_reactive(&self) -> T {
        (self.s_apparent * self.s_apparent - self.p_active * self.p_active)
            .max(T::zero())
            .sqrt()
    }

    pub fn mains_period(&self) -> T {
        self.mains_freq.recip()
    }
}

/// Synchronized voltage/current samples at a fixed rate.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveformFrame<T> {
    u_samples: Vec<T>,
    i_samples: Vec<T>,
    sample_rate: T,
    start_time: T,
}

impl<T: Real> WaveformFrame<T> {
    pub fn new(
        u_samples: Vec<T>,
        i_samples: Vec<T>,
        sample_rate: T,
        start_time: T,
    ) -> Result<Self, WaveformError> {
        if u_samples.len() != i_samples.len() || u_samples.len() < 2 {
            return Err(WaveformError::BadFrameLength {
                u: u_samples.len(),
                i: i_samples.len(),
            });
        }
        if !(sample_rate > T::zero() && sample_rate.is_finite()) {
            return Err(WaveformError::BadSampleRate(sample_rate.as_f64()));
        }
        Ok(Self {
            u_samples,
            i_samples,
            sample_rate,
            start_time,
        })
    }

    pub fn u_samples(&self) -> &[T] {
        &self.u_samples
    }

    pub fn i_samples(&self) -> &[T] {
        &self.i_samples
    }

    pub fn sample_rate(&self) -> T {
        self.sample_rate
    }

    pub fn start_time(&self) -> T {
        self.start_time
    }

    pub fn len(&self) -> usize {
        self.u_samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u_samples.is_empty()
    }

    pub fn duration(&self) -> T {
        T::of_usize(self.len()) / self.sample_rate
    }
}

/// Samples `profile` for `duration` seconds starting at `start_time`.
///
/// Voltage is `sqrt(2) U sin(2 pi f t)`, current is
/// `gain sqrt(2) (S/U) sin(2 pi f t - phi)` plus Gaussian noise drawn from a
/// ChaCha stream seeded with `seed`.
pub fn synthesize<T: Real>(
    profile: &ApplianceProfile<T>,
    sample_rate: T,
    duration: T,
    start_time: T,
    seed: u64,
) -> Result<WaveformFrame<T>, WaveformError> {
    profile.validate()?;
    let f = profile.mains_freq;
    let min_rate = T::of(MIN_SAMPLES_PER_CYCLE) * f;
    if !(sample_rate >= min_rate) || !sample_rate.is_finite() {
        return Err(WaveformError::SampleRateTooLow {
            sample_rate: sample_rate.as_f64(),
            min: min_rate.as_f64(),
        });
    }
    let period = f.recip();
    // Tolerate representation error in e.g. 0.02 * 50.
    if !(duration * f >= T::of(1.0 - 1e-9)) {
        return Err(WaveformError::DurationTooShort {
            duration: duration.as_f64(),
            min: period.as_f64(),
        });
    }

    let n = (duration * sample_rate).round().to_usize().unwrap_or(0).max(2);
    let u_peak = profile.voltage_amplitude();
    let i_peak = profile.gain_error * profile.current_amplitude();
    let phi = profile.phi();
    let omega = T::TAU() * f;

    let noise_sigma = (profile.noise_stddev * profile.current_amplitude()).as_f64();
    let mut noise = (noise_sigma > 0.0).then(|| {
        let dist = Normal::new(0.0, noise_sigma).expect("sigma is finite and positive");
        let rng = ChaCha8Rng::seed_from_u64(seed);
        dist.sample_iter(rng)
    });

    let mut u_samples = Vec::with_capacity(n);
    let mut i_samples = Vec::with_capacity(n);
    for k in 0..n {
        let t = start_time + T::of_usize(k) / sample_rate;
        let angle = omega * t;
        u_samples.push(u_peak * angle.sin());
        let mut i = i_peak * (angle - phi).sin();
        if let Some(noise) = noise.as_mut() {
            i = i + T::of(noise.next().expect("infinite stream"));
        }
        i_samples.push(i);
    }
    WaveformFrame::new(u_samples, i_samples, sample_rate, start_time)
}

/// Applies the load relay: an open relay interrupts the current path while
/// the grid voltage stays present.
pub fn relay_gate<T: Real>(mut frame: WaveformFrame<T>, relay_closed: bool) -> WaveformFrame<T> {
    if !relay_closed {
        frame.i_samples.iter_mut().for_each(|i| *i = T::zero());
    }
    frame
}
