//! Energest-style tick accounting and the tick-to-power conversion.
//!
//! A node's CPU is always either active or in low-power mode; its radio is
//! off, transmitting or receiving. The ledger accrues elapsed ticks into the
//! counter of the state that was current, exactly like Contiki's `ALL_CPU`,
//! `ALL_LPM`, `ALL_TX` and `ALL_RX` counters.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{TickTime, RTIMER_HZ};

#[derive(Debug, Error, PartialEq)]
pub enum EnergyError {
    #[error("{ticks} ticks do not fit in a {runtime_s} s interval at {rtimer_hz} Hz")]
    TicksExceedInterval {
        ticks: u64,
        rtimer_hz: u64,
        runtime_s: f64,
    },
    #[error("runtime must be positive, got {0} s")]
    NonPositiveRuntime(f64),
    #[error("rtimer rate must be positive")]
    ZeroRtimer,
    #[error("invalid current profile: {0}")]
    InvalidProfile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CpuState {
    Active,
    Lpm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RadioState {
    Off,
    Tx,
    Rx,
}

/// Cumulative per-state tick counters for one node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnergestLedger {
    pub cpu_ticks: u64,
    pub lpm_ticks: u64,
    pub tx_ticks: u64,
    pub rx_ticks: u64,
    cpu_state: CpuState,
    radio_state: RadioState,
    last_cpu_change: TickTime,
    last_radio_change: TickTime,
}

impl Default for EnergestLedger {
    fn default() -> Self {
        Self::new(CpuState::Lpm, RadioState::Off)
    }
}

impl EnergestLedger {
    /// A ledger starting at tick zero in the given states.
    pub fn new(cpu: CpuState, radio: RadioState) -> Self {
        EnergestLedger {
            cpu_ticks: 0,
            lpm_ticks: 0,
            tx_ticks: 0,
            rx_ticks: 0,
            cpu_state: cpu,
            radio_state: radio,
            last_cpu_change: TickTime::ZERO,
            last_radio_change: TickTime::ZERO,
        }
    }

    pub fn cpu_state(&self) -> CpuState {
        self.cpu_state
    }

    pub fn radio_state(&self) -> RadioState {
        self.radio_state
    }

    pub fn settled_at(&self) -> TickTime {
        self.last_cpu_change.max(self.last_radio_change)
    }

    /// Accrues all ticks up to `now` into the counters of the current states.
    pub fn settle(&mut self, now: TickTime) {
        assert!(
            now >= self.last_cpu_change && now >= self.last_radio_change,
            "ledger settled backwards to {now}"
        );
        let cpu_delta = (now - self.last_cpu_change).ticks();
        match self.cpu_state {
            CpuState::Active => self.cpu_ticks += cpu_delta,
            CpuState::Lpm => self.lpm_ticks += cpu_delta,
        }
        let radio_delta = (now - self.last_radio_change).ticks();
        match self.radio_state {
            RadioState::Tx => self.tx_ticks += radio_delta,
            RadioState::Rx => self.rx_ticks += radio_delta,
            RadioState::Off => {}
        }
        self.last_cpu_change = now;
        self.last_radio_change = now;
    }

    pub fn set_cpu(&mut self, state: CpuState, now: TickTime) {
        self.settle(now);
        self.cpu_state = state;
    }

    pub fn set_radio(&mut self, state: RadioState, now: TickTime) {
        self.settle(now);
        self.radio_state = state;
    }

    /// Snapshot of the counters settled at `now`.
    pub fn snapshot(&self, now: TickTime) -> TickCounters {
        let mut copy = self.clone();
        copy.settle(now);
        copy.counters()
    }

    pub fn counters(&self) -> TickCounters {
        TickCounters {
            cpu: self.cpu_ticks,
            lpm: self.lpm_ticks,
            tx: self.tx_ticks,
            rx: self.rx_ticks,
        }
    }
}

/// The four cumulative counters, detached from state tracking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TickCounters {
    pub cpu: u64,
    pub lpm: u64,
    pub tx: u64,
    pub rx: u64,
}

/// Per-state current draw of a node class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurrentProfile {
    pub cpu_active_ma: f64,
    pub lpm_ma: f64,
    pub tx_ma: f64,
    pub rx_ma: f64,
    pub voltage_v: f64,
    pub rtimer_hz: u64,
}

impl Default for CurrentProfile {
    /// Z1-class defaults: MSP430F2617 at 8 MHz, its deepest sleep current,
    /// and a CC2420 transceiver, all at 3 V.
    fn default() -> Self {
        CurrentProfile {
            cpu_active_ma: 4.0,
            lpm_ma: 0.0001,
            tx_ma: 17.4,
            rx_ma: 18.8,
            voltage_v: 3.0,
            rtimer_hz: RTIMER_HZ,
        }
    }
}

impl CurrentProfile {
    pub fn validate(&self) -> Result<(), EnergyError> {
        let currents = [
            ("cpu_active_ma", self.cpu_active_ma),
            ("lpm_ma", self.lpm_ma),
            ("tx_ma", self.tx_ma),
            ("rx_ma", self.rx_ma),
        ];
        for (name, value) in currents {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(EnergyError::InvalidProfile(format!(
                    "{name} must be >= 0, got {value}"
                )));
            }
        }
        if !(self.voltage_v > 0.0 && self.voltage_v.is_finite()) {
            return Err(EnergyError::InvalidProfile(format!(
                "voltage_v must be > 0, got {}",
                self.voltage_v
            )));
        }
        if self.rtimer_hz == 0 {
            return Err(EnergyError::ZeroRtimer);
        }
        if self.lpm_ma >= self.cpu_active_ma {
            return Err(EnergyError::InvalidProfile(format!(
                "lpm_ma ({}) must be below cpu_active_ma ({})",
                self.lpm_ma, self.cpu_active_ma
            )));
        }
        Ok(())
    }
}

/// One trace row's power figures, in milliwatts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PowerSample {
    pub interval_end_s: f64,
    pub cpu_mw: f64,
    pub lpm_mw: f64,
    pub tx_mw: f64,
    pub rx_mw: f64,
    pub total_mw: f64,
}

impl PowerSample {
    pub fn from_components(
        interval_end_s: f64,
        cpu_mw: f64,
        lpm_mw: f64,
        tx_mw: f64,
        rx_mw: f64,
    ) -> Self {
        PowerSample {
            interval_end_s,
            cpu_mw,
            lpm_mw,
            tx_mw,
            rx_mw,
            total_mw: total_power(cpu_mw, lpm_mw, tx_mw, rx_mw),
        }
    }

    pub fn components(&self) -> [f64; 4] {
        [self.cpu_mw, self.lpm_mw, self.tx_mw, self.rx_mw]
    }
}

/// Average power of one state over `runtime_s`, given the ticks spent in it.
///
/// `ticks * current * voltage / (rtimer_hz * runtime_s)`. The tick fraction is
/// formed first so that a fully occupied interval yields `current * voltage`
/// exactly.
pub fn component_power(
    delta_ticks: u64,
    current_ma: f64,
    voltage_v: f64,
    rtimer_hz: u64,
    runtime_s: f64,
) -> Result<f64, EnergyError> {
    if rtimer_hz == 0 {
        return Err(EnergyError::ZeroRtimer);
    }
    if !(runtime_s > 0.0 && runtime_s.is_finite()) {
        return Err(EnergyError::NonPositiveRuntime(runtime_s));
    }
    let capacity = rtimer_hz as f64 * runtime_s;
    if delta_ticks as f64 > capacity {
        return Err(EnergyError::TicksExceedInterval {
            ticks: delta_ticks,
            rtimer_hz,
            runtime_s,
        });
    }
    let fraction = delta_ticks as f64 / capacity;
    Ok(fraction * (current_ma * voltage_v))
}

pub fn total_power(cpu_mw: f64, lpm_mw: f64, tx_mw: f64, rx_mw: f64) -> f64 {
    cpu_mw + lpm_mw + tx_mw + rx_mw
}

/// Supply power as current times voltage (amperes and volts give watts).
pub fn battery_power(current_a: f64, voltage_v: f64) -> f64 {
    current_a * voltage_v
}
