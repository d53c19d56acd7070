//! Meter node emulation: the energy-monitor register file plus the relay,
//! sleep mode, local store-and-forward buffer and command window around it.

mod registers;

pub use registers::{
    FixedPoint, Register, RegisterError, RegisterFile, RegisterValue, ENERGY_LSB,
    IRMS_FULL_SCALE, MODE_RELAY_CLOSED, MODE_SLEEP, POWER_LSB, VRMS_FULL_SCALE,
};

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::meter_id::MeterId;
use crate::powercalc::{
    measure_frame, EnergyAccumulator, PowerTriplet, SamplingFrequencyError, SamplingLimits,
};
use crate::waveform::{relay_gate, synthesize, ApplianceProfile, MIN_SAMPLES_PER_CYCLE};

pub const DEFAULT_BUFFER_CAPACITY: usize = 4096;
pub const DEFAULT_SAMPLING_FREQ: f64 = 1000.0;
/// Samples per measurement window; 10 cycles of 50 Hz at 1 kHz.
pub const DEFAULT_WINDOW_SAMPLES: usize = 200;
/// Never measure over fewer mains cycles than this.
pub const MIN_WINDOW_CYCLES: usize = 2;

/// Control command understood by a meter node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", content = "arg", rename_all = "snake_case")]
pub enum Command {
    SwitchOn,
    SwitchOff,
    Sleep,
    Wake,
    /// New sampling frequency in hertz.
    SetFs(f64),
}

/// A command together with the identifier its acknowledgment echoes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommandEnvelope {
    pub command_id: u32,
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CommandOutcome {
    Accepted,
    Rejected(SamplingFrequencyError),
}

impl CommandOutcome {
    pub fn is_accepted(&self) -> bool {
        matches!(self, CommandOutcome::Accepted)
    }
}

/// One measurement as reported by a meter. All electrical values are the
/// decoded contents of the register file at emission time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerReading {
    pub meter_id: MeterId,
    pub seq: u32,
    /// Milliseconds since the Unix epoch on the coordinator's timescale.
    pub timestamp_ms: u64,
    pub v_rms: f64,
    pub i_rms: f64,
    pub phi: f64,
    pub triplet: PowerTriplet<f64>,
    pub energy_j: f64,
    pub relay_closed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeterConfig {
    pub buffer_capacity: usize,
    pub window_samples: usize,
    pub limits: SamplingLimits,
    /// Base seed for the per-window noise streams.
    pub seed: u64,
}

impl Default for MeterConfig {
    fn default() -> Self {
        Self {
            buffer_capacity: DEFAULT_BUFFER_CAPACITY,
            window_samples: DEFAULT_WINDOW_SAMPLES,
            limits: SamplingLimits::default(),
            seed: 0,
        }
    }
}

/// State of a single meter node. Owned by one task at a time.
#[derive(Debug, Clone)]
pub struct MeterState {
    meter_id: MeterId,
    profile: ApplianceProfile<f64>,
    config: MeterConfig,
    registers: RegisterFile,
    sampling_freq: f64,
    relay_closed: bool,
    sleeping: bool,
    seq_next: u32,
    buffer: VecDeque<PowerReading>,
    evicted: u64,
    /// Seconds to add to the node clock to get coordinator time.
    clock_offset: f64,
    energy: EnergyAccumulator<f64>,
    /// Start of the window currently being measured; `None` until the first
    /// tick after construction or a sleep/wake transition.
    window_start: Option<f64>,
}

impl MeterState {
    pub fn new(
        meter_id: MeterId,
        profile: ApplianceProfile<f64>,
        sampling_freq: f64,
        config: MeterConfig,
    ) -> Result<Self, crate::Error> {
        profile.validate()?;
        let sampling_freq = config.limits.validate(sampling_freq)?;
        let mut registers = RegisterFile::new();
        registers.write(Register::SamplingFreq, sampling_freq);
        registers.set_mode(false, true);
        Ok(Self {
            meter_id,
            profile,
            registers,
            sampling_freq,
            relay_closed: true,
            sleeping: false,
            seq_next: 0,
            buffer: VecDeque::with_capacity(config.buffer_capacity.min(DEFAULT_BUFFER_CAPACITY)),
            evicted: 0,
            clock_offset: 0.0,
            energy: EnergyAccumulator::for_sampling_freq(sampling_freq)?,
            window_start: None,
            config,
        })
    }

    pub fn meter_id(&self) -> MeterId {
        self.meter_id
    }

    pub fn profile(&self) -> &ApplianceProfile<f64> {
        &self.profile
    }

    pub fn registers(&self) -> &RegisterFile {
        &self.registers
    }

    pub fn read_register(&self, reg: Register) -> RegisterValue {
        self.registers.read(reg)
    }

    pub fn sampling_freq(&self) -> f64 {
        self.sampling_freq
    }

    pub fn relay_closed(&self) -> bool {
        self.relay_closed
    }

    pub fn sleeping(&self) -> bool {
        self.sleeping
    }

    pub fn seq_next(&self) -> u32 {
        self.seq_next
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    pub fn buffer_capacity(&self) -> usize {
        self.config.buffer_capacity
    }

    /// Readings lost to buffer overflow so far.
    pub fn evicted(&self) -> u64 {
        self.evicted
    }

    pub fn clock_offset(&self) -> f64 {
        self.clock_offset
    }

    pub fn set_clock_offset(&mut self, seconds: f64) {
        self.clock_offset = seconds;
    }

    pub fn energy(&self) -> &EnergyAccumulator<f64> {
        &self.energy
    }

    /// Mains cycles per measurement window at the current sampling frequency.
    pub fn window_cycles(&self) -> usize {
        let f = self.profile.mains_freq;
        let cycles = (self.config.window_samples as f64 * f / self.sampling_freq).round() as usize;
        cycles.max(MIN_WINDOW_CYCLES)
    }

    /// Time between consecutive readings.
    pub fn measurement_period(&self) -> f64 {
        self.window_cycles() as f64 / self.profile.mains_freq
    }

    /// Rate at which the window's waveform is sampled: the configured
    /// frequency, raised to four samples per mains cycle when lower.
    pub fn waveform_rate(&self) -> f64 {
        self.sampling_freq
            .max(MIN_SAMPLES_PER_CYCLE * self.profile.mains_freq)
    }

    /// Node-clock time at which the current window completes; `None` while
    /// asleep or before the first tick anchors a window.
    pub fn next_emission(&self) -> Option<f64> {
        match (self.sleeping, self.window_start) {
            (false, Some(start)) => Some(start + self.measurement_period()),
            _ => None,
        }
    }

    /// Advances the meter to `now` (node clock, seconds). Emits at most one
    /// reading; call repeatedly to catch up over several periods.
    pub fn tick(&mut self, now: f64) -> Option<PowerReading> {
        if self.sleeping {
            return None;
        }
        let start = match self.window_start {
            Some(start) => start,
            None => {
                self.window_start = Some(now);
                return None;
            }
        };
        let period = self.measurement_period();
        if now - start < period - 1e-9 {
            return None;
        }
        self.window_start = Some(start + period);
        Some(self.measure_window(start, period))
    }

    fn measure_window(&mut self, start: f64, period: f64) -> PowerReading {
        let rate = self.waveform_rate();
        let seed = mix_seed(self.config.seed, self.seq_next);
        let measured = synthesize(&self.profile, rate, period, start, seed)
            .map_err(crate::Error::from)
            .map(|frame| relay_gate(frame, self.relay_closed))
            .and_then(|frame| Ok(measure_frame(&frame, self.profile.mains_freq)?));
        // The profile and rate were validated on entry, so this only fails on
        // pathological float input; report an empty window in that case.
        let measured = measured.ok();
        let (v_rms, i_rms, triplet) = measured
            .map(|m| (m.v_rms, m.i_rms, m.triplet))
            .unwrap_or((0.0, 0.0, PowerTriplet::zero()));

        let steps = (period * self.sampling_freq).round() as u64;
        for _ in 0..steps {
            self.energy.add(triplet.active_p);
        }

        let regs = &mut self.registers;
        regs.write(Register::Vrms, v_rms);
        regs.write(Register::Irms, i_rms);
        regs.write(Register::ActivePower, triplet.active_p);
        regs.write(Register::ReactivePower, triplet.reactive_q);
        regs.write(Register::ApparentPower, triplet.apparent_s);
        regs.write_energy(self.energy.energy_j);

        let reading = self.reading_from_registers(start + period);
        self.seq_next = self.seq_next.wrapping_add(1);
        self.push_reading(reading.clone());
        reading
    }

    fn reading_from_registers(&self, window_end: f64) -> PowerReading {
        let regs = &self.registers;
        let triplet = PowerTriplet {
            active_p: regs.value(Register::ActivePower),
            reactive_q: regs.value(Register::ReactivePower),
            apparent_s: regs.value(Register::ApparentPower),
        };
        let timestamp_ms = ((window_end + self.clock_offset) * 1000.0).round().max(0.0) as u64;
        PowerReading {
            meter_id: self.meter_id,
            seq: self.seq_next,
            timestamp_ms,
            v_rms: regs.value(Register::Vrms),
            i_rms: regs.value(Register::Irms),
            phi: triplet.reactive_q.atan2(triplet.active_p),
            triplet,
            energy_j: regs.value(Register::Energy),
            relay_closed: self.relay_closed,
        }
    }

    fn push_reading(&mut self, reading: PowerReading) {
        if self.config.buffer_capacity == 0 {
            self.evicted += 1;
            return;
        }
        while self.buffer.len() >= self.config.buffer_capacity {
            self.buffer.pop_front();
            self.evicted += 1;
        }
        self.buffer.push_back(reading);
    }

    pub fn apply_command(&mut self, cmd: Command) -> CommandOutcome {
        match cmd {
            Command::SwitchOn => self.relay_closed = true,
            Command::SwitchOff => self.relay_closed = false,
            Command::Sleep => {
                self.sleeping = true;
                self.window_start = None;
            }
            Command::Wake => {
                self.sleeping = false;
                self.window_start = None;
            }
            Command::SetFs(f) => match self.config.limits.validate(f) {
                Ok(f) => {
                    self.sampling_freq = f;
                    self.energy.step_s = f.recip();
                    self.registers.write(Register::SamplingFreq, f);
                }
                Err(e) => return CommandOutcome::Rejected(e),
            },
        }
        self.registers.set_mode(self.sleeping, self.relay_closed);
        CommandOutcome::Accepted
    }

    /// Applies pending commands in arrival order.
    pub fn command_window<I>(&mut self, inbox: I) -> Vec<(u32, CommandOutcome)>
    where
        I: IntoIterator<Item = CommandEnvelope>,
    {
        inbox
            .into_iter()
            .map(|env| (env.command_id, self.apply_command(env.command)))
            .collect()
    }

    /// Removes and returns up to `max` of the oldest buffered readings.
    pub fn drain_buffer(&mut self, max: usize) -> Vec<PowerReading> {
        let n = max.min(self.buffer.len());
        self.buffer.drain(..n).collect()
    }

    /// Puts readings that could not be delivered back at the head of the
    /// buffer, oldest first. Readings beyond capacity are evicted.
    pub fn requeue_front(&mut self, readings: Vec<PowerReading>) {
        for reading in readings.into_iter().rev() {
            if self.buffer.len() >= self.config.buffer_capacity {
                self.evicted += 1;
                continue;
            }
            self.buffer.push_front(reading);
        }
    }
}

fn mix_seed(seed: u64, seq: u32) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (u64::from(seq)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
