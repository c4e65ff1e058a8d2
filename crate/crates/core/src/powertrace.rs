//! Interval sampling of cumulative tick counters into per-interval power rows.

use thiserror::Error;

use crate::energy::{component_power, CurrentProfile, EnergyError, PowerSample, TickCounters};

#[derive(Debug, Error, PartialEq)]
pub enum TraceError {
    #[error("ledger corruption: {state} counter went from {prev} to {now}")]
    Regression {
        state: &'static str,
        prev: u64,
        now: u64,
    },
    #[error("cpu + lpm ticks = {got}, expected the interval's {expected}")]
    Conservation { got: u64, expected: u64 },
    #[error("radio ticks {got} exceed the interval's {expected}")]
    RadioOverflow { got: u64, expected: u64 },
    #[error("cannot summarize an empty trace")]
    Empty,
    #[error(transparent)]
    Energy(#[from] EnergyError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub interval_end_s: f64,
    pub deltas: TickCounters,
    pub power: PowerSample,
}

pub fn interval_ticks(interval_s: f64, rtimer_hz: u64) -> u64 {
    (interval_s * rtimer_hz as f64).round() as u64
}

/// Builds the row for the interval ending at `interval_end_s` from two
/// cumulative snapshots taken `interval_s` apart.
pub fn take_sample(
    prev: &TickCounters,
    now: &TickCounters,
    profile: &CurrentProfile,
    interval_end_s: f64,
    interval_s: f64,
) -> Result<TraceRow, TraceError> {
    let delta = |state, p: u64, n: u64| {
        n.checked_sub(p).ok_or(TraceError::Regression {
            state,
            prev: p,
            now: n,
        })
    };
    let deltas = TickCounters {
        cpu: delta("cpu", prev.cpu, now.cpu)?,
        lpm: delta("lpm", prev.lpm, now.lpm)?,
        tx: delta("tx", prev.tx, now.tx)?,
        rx: delta("rx", prev.rx, now.rx)?,
    };
    let expected = interval_ticks(interval_s, profile.rtimer_hz);
    if deltas.cpu + deltas.lpm != expected {
        return Err(TraceError::Conservation {
            got: deltas.cpu + deltas.lpm,
            expected,
        });
    }
    if deltas.tx + deltas.rx > expected {
        return Err(TraceError::RadioOverflow {
            got: deltas.tx + deltas.rx,
            expected,
        });
    }
    let p =
        |ticks, ma| component_power(ticks, ma, profile.voltage_v, profile.rtimer_hz, interval_s);
    let power = PowerSample::from_components(
        interval_end_s,
        p(deltas.cpu, profile.cpu_active_ma)?,
        p(deltas.lpm, profile.lpm_ma)?,
        p(deltas.tx, profile.tx_ma)?,
        p(deltas.rx, profile.rx_ma)?,
    );
    Ok(TraceRow {
        interval_end_s,
        deltas,
        power,
    })
}

/// Column means of a trace. The average total is the mean of row totals.
pub fn summarize<'a>(
    samples: impl IntoIterator<Item = &'a PowerSample>,
) -> Result<PowerSample, TraceError> {
    let mut sum = [0.0f64; 5];
    let mut n = 0usize;
    let mut last_end = 0.0;
    for s in samples {
        for (acc, v) in sum
            .iter_mut()
            .zip([s.cpu_mw, s.lpm_mw, s.tx_mw, s.rx_mw, s.total_mw])
        {
            *acc += v;
        }
        last_end = s.interval_end_s;
        n += 1;
    }
    if n == 0 {
        return Err(TraceError::Empty);
    }
    let m = |i: usize| sum[i] / n as f64;
    Ok(PowerSample {
        interval_end_s: last_end,
        cpu_mw: m(0),
        lpm_mw: m(1),
        tx_mw: m(2),
        rx_mw: m(3),
        total_mw: m(4),
    })
}

/// Mean of a column of totals, as in a table's average row.
pub fn mean(values: &[f64]) -> Result<f64, TraceError> {
    if values.is_empty() {
        return Err(TraceError::Empty);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Accumulates rows for one node as sampling boundaries pass.
#[derive(Debug, Clone)]
pub struct Sampler {
    profile: CurrentProfile,
    interval_s: f64,
    prev: TickCounters,
    snapshots: Vec<TickCounters>,
    rows: Vec<TraceRow>,
}

impl Sampler {
    pub fn new(profile: CurrentProfile, interval_s: f64) -> Self {
        Sampler {
            profile,
            interval_s,
            prev: TickCounters::default(),
            snapshots: Vec::new(),
            rows: Vec::new(),
        }
    }

    /// Records the cumulative counters settled at the next boundary.
    pub fn sample(&mut self, now: TickCounters) -> Result<&TraceRow, TraceError> {
        let end = (self.rows.len() + 1) as f64 * self.interval_s;
        let row = take_sample(&self.prev, &now, &self.profile, end, self.interval_s)?;
        self.prev = now;
        self.snapshots.push(now);
        self.rows.push(row);
        Ok(self.rows.last().expect("just pushed"))
    }

    pub fn rows(&self) -> &[TraceRow] {
        &self.rows
    }

    /// Cumulative counters recorded at each boundary.
    pub fn snapshots(&self) -> &[TickCounters] {
        &self.snapshots
    }

    pub fn into_rows(self) -> Vec<TraceRow> {
        self.rows
    }
}

/// Rebuilds a trace from recorded cumulative snapshots.
pub fn resample(
    snapshots: &[TickCounters],
    profile: &CurrentProfile,
    interval_s: f64,
) -> Result<Vec<TraceRow>, TraceError> {
    let mut sampler = Sampler::new(*profile, interval_s);
    for s in snapshots {
        sampler.sample(*s)?;
    }
    Ok(sampler.into_rows())
}
