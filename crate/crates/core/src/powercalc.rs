//! RMS, phase shift, power triangle and energy integration.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;
use crate::waveform::WaveformFrame;

/// Lowest sampling frequency accepted for 50 Hz mains.
pub const NYQUIST_FLOOR_HZ: f64 = 100.0;
pub const DEFAULT_FS_CEILING_HZ: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PowerError {
    #[error("at least 2 samples are required, got {0}")]
    TooFewSamples(usize),
    #[error("peak amplitude must be non-negative, got {0}")]
    NegativeAmplitude(f64),
    #[error("sample sequences differ in length ({u} vs {i})")]
    LengthMismatch { u: usize, i: usize },
    #[error("window covers {cycles:.3} mains cycles, at least 2 are required")]
    TooFewCycles { cycles: f64 },
    #[error("sample rate {sample_rate} Hz is below 4 x mains frequency ({min} Hz)")]
    SampleRateTooLow { sample_rate: f64, min: f64 },
    #[error("no signal: phase is undefined for an all-zero waveform")]
    NoSignal,
    #[error("RMS inputs must be non-negative (u = {u}, i = {i})")]
    NegativeRms { u: f64, i: f64 },
    #[error("energy step must be positive, got {0} s")]
    BadStep(f64),
    #[error(transparent)]
    SamplingFrequency(#[from] SamplingFrequencyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum SamplingFrequencyError {
    #[error("sampling frequency {0} Hz is below the {NYQUIST_FLOOR_HZ} Hz Nyquist floor")]
    BelowNyquist(f64),
    #[error("sampling frequency {value} Hz exceeds the configured ceiling of {ceiling} Hz")]
    AboveCeiling { value: f64, ceiling: f64 },
}

impl SamplingFrequencyError {
    pub fn value(&self) -> f64 {
        match *self {
            Self::BelowNyquist(v) => v,
            Self::AboveCeiling { value, .. } => value,
        }
    }
}

/// Root mean square of `samples`.
pub fn rms<T: Real>(samples: &[T]) -> Result<T, PowerError> {
    if samples.len() < 2 {
        return Err(PowerError::TooFewSamples(samples.len()));
    }
    let sum = samples.iter().fold(T::zero(), |acc, &x| acc + x * x);
    Ok((sum / T::of_usize(samples.len())).sqrt())
}

/// RMS of a pure sinusoid from its peak amplitude (crest factor `sqrt(2)`).
pub fn crest_rms<T: Real>(peak_amplitude: T) -> Result<T, PowerError> {
    if peak_amplitude < T::zero() || peak_amplitude.is_nan() {
        return Err(PowerError::NegativeAmplitude(peak_amplitude.as_f64()));
    }
    Ok(peak_amplitude / T::SQRT_2())
}

/// Estimates the phase shift `phi_u - phi_i` between voltage and current.
///
/// The lag maximizing the circular cross-correlation over the longest
/// whole-cycle prefix is searched within half a mains period, refined by
/// three-point parabolic interpolation, and the parabola's known bias on a
/// sinusoidal correlation peak is removed. Current lagging voltage gives a
/// positive angle. The result lies in `(-pi, pi]`.
pub fn phase_shift<T: Real>(
    u_samples: &[T],
    i_samples: &[T],
    sample_rate: T,
    mains_freq: T,
) -> Result<T, PowerError> {
    if u_samples.len() != i_samples.len() {
        return Err(PowerError::LengthMismatch {
            u: u_samples.len(),
            i: i_samples.len(),
        });
    }
    let min_rate = T::of(4.0) * mains_freq;
    if !(sample_rate >= min_rate) {
        return Err(PowerError::SampleRateTooLow {
            sample_rate: sample_rate.as_f64(),
            min: min_rate.as_f64(),
        });
    }
    let samples_per_cycle = sample_rate / mains_freq;
    let cycles = T::of_usize(u_samples.len()) / samples_per_cycle;
    if cycles < T::of(2.0 - 1e-9) {
        return Err(PowerError::TooFewCycles {
            cycles: cycles.as_f64(),
        });
    }
    let is_zero = |s: &[T]| s.iter().all(|x| x.is_zero());
    if is_zero(i_samples) || is_zero(u_samples) {
        return Err(PowerError::NoSignal);
    }

    let whole = (cycles + T::of(1e-9)).floor();
    let m = (whole * samples_per_cycle)
        .round()
        .to_usize()
        .unwrap_or(u_samples.len())
        .min(u_samples.len());
    let (u, i) = (&u_samples[..m], &i_samples[..m]);
    let corr = |lag: isize| -> T {
        let shift = lag.rem_euclid(m as isize) as usize;
        u.iter()
            .zip(i[shift..].iter().chain(&i[..shift]))
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
    };

    let max_lag = (samples_per_cycle / T::of(2.0))
        .floor()
        .to_isize()
        .unwrap_or(0);
    // Visit lags by increasing magnitude so ties keep the smaller |lag|.
    let mut best_lag = 0isize;
    let mut best = corr(0);
    for mag in 1..=max_lag {
        for lag in [mag, -mag] {
            let c = corr(lag);
            if c > best {
                best = c;
                best_lag = lag;
            }
        }
    }
    if !(best > T::zero()) {
        return Err(PowerError::NoSignal);
    }

    let (left, right) = (corr(best_lag - 1), corr(best_lag + 1));
    let curvature = left - best - best + right;
    let offset = if curvature < T::zero() {
        (left - right) / (T::of(2.0) * curvature)
    } else {
        T::zero()
    };
    let rad_per_sample = T::TAU() / samples_per_cycle;
    // The parabola through three samples of cos(x) places the vertex at
    // tan(d a) / (2 tan(d / 2)) for a true offset a; invert that.
    let half = rad_per_sample / T::of(2.0);
    let offset = (T::of(2.0) * offset * half.tan()).atan() / rad_per_sample;

    Ok(wrap_angle(rad_per_sample * (T::of(best_lag as f64) + offset)))
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle<T: Real>(angle: T) -> T {
    let tau = T::TAU();
    let mut a = angle - tau * (angle / tau).round();
    if a <= -T::PI() {
        a = a + tau;
    } else if a > T::PI() {
        a = a - tau;
    }
    a
}

/// Active, reactive and apparent power.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PowerTriplet<T> {
    /// Watts.
    pub active_p: T,
    /// Volt-amperes reactive; positive for lagging current.
    pub reactive_q: T,
    /// Volt-amperes.
    pub apparent_s: T,
}

impl<T: Real> PowerTriplet<T> {
    pub fn zero() -> Self {
        Self {
            active_p: T::zero(),
            reactive_q: T::zero(),
            apparent_s: T::zero(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.active_p.is_zero() && self.reactive_q.is_zero() && self.apparent_s.is_zero()
    }

    pub fn power_factor(&self) -> Option<T> {
        (self.apparent_s > T::zero()).then(|| self.active_p / self.apparent_s)
    }
}

pub fn power_triplet<T: Real>(u_rms: T, i_rms: T, phi: T) -> Result<PowerTriplet<T>, PowerError> {
    if !(u_rms >= T::zero()) || !(i_rms >= T::zero()) {
        return Err(PowerError::NegativeRms {
            u: u_rms.as_f64(),
            i: i_rms.as_f64(),
        });
    }
    let s = u_rms * i_rms;
    let (sin, cos) = phi.sin_cos();
    Ok(PowerTriplet {
        active_p: s * cos,
        reactive_q: s * sin,
        apparent_s: s,
    })
}

/// Left-endpoint Riemann sum of active power over fixed steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyAccumulator<T> {
    pub energy_j: T,
    pub step_s: T,
    pub sample_count: u64,
}

impl<T: Real> EnergyAccumulator<T> {
    pub fn new(step_s: T) -> Result<Self, PowerError> {
        if !(step_s > T::zero()) || !step_s.is_finite() {
            return Err(PowerError::BadStep(step_s.as_f64()));
        }
        Ok(Self {
            energy_j: T::zero(),
            step_s,
            sample_count: 0,
        })
    }

    /// Accumulator with `T_s = 1 / f_s`.
    pub fn for_sampling_freq(sampling_freq: T) -> Result<Self, PowerError> {
        Self::new(sampling_freq.recip())
    }

    #[must_use]
    pub fn accumulate(mut self, active_p: T) -> Self {
        self.add(active_p);
        self
    }

    pub fn add(&mut self, active_p: T) {
        self.energy_j = self.energy_j + active_p * self.step_s;
        self.sample_count += 1;
    }

    /// Combines the sums of two contiguous runs with the same step.
    #[must_use]
    pub fn merge(mut self, other: &Self) -> Self {
        self.energy_j = self.energy_j + other.energy_j;
        self.sample_count += other.sample_count;
        self
    }

    pub fn kwh(&self) -> T {
        self.energy_j / T::of(3.6e6)
    }
}

/// Allowed sampling-frequency band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingLimits {
    pub floor_hz: f64,
    pub ceiling_hz: f64,
}

impl Default for SamplingLimits {
    fn default() -> Self {
        Self {
            floor_hz: NYQUIST_FLOOR_HZ,
            ceiling_hz: DEFAULT_FS_CEILING_HZ,
        }
    }
}

impl SamplingLimits {
    pub fn validate(&self, f: f64) -> Result<f64, SamplingFrequencyError> {
        if !(f >= self.floor_hz) {
            return Err(SamplingFrequencyError::BelowNyquist(f));
        }
        if !(f <= self.ceiling_hz) {
            return Err(SamplingFrequencyError::AboveCeiling {
                value: f,
                ceiling: self.ceiling_hz,
            });
        }
        Ok(f)
    }
}

pub fn validate_sampling_frequency(f: f64) -> Result<f64, SamplingFrequencyError> {
    SamplingLimits::default().validate(f)
}

/// Everything computed from one measurement window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowMeasurement<T> {
    pub v_rms: T,
    pub i_rms: T,
    pub phi: T,
    pub triplet: PowerTriplet<T>,
}

/// Runs rms/rms/phase/triplet over a frame. A frame without current (open
/// relay, zero load) reports `phi = 0` and a zero triplet.
pub fn measure_frame<T: Real>(
    frame: &WaveformFrame<T>,
    mains_freq: T,
) -> Result<WindowMeasurement<T>, PowerError> {
    let v_rms = rms(frame.u_samples())?;
    let i_rms = rms(frame.i_samples())?;
    let phi = match phase_shift(
        frame.u_samples(),
        frame.i_samples(),
        frame.sample_rate(),
        mains_freq,
    ) {
        Ok(phi) => phi,
        Err(PowerError::NoSignal) => T::zero(),
        Err(e) => return Err(e),
    };
    let triplet = power_triplet(v_rms, i_rms, phi)?;
    Ok(WindowMeasurement {
        v_rms,
        i_rms,
        phi,
        triplet,
    })
}
