//! Scenario configuration and its TOML file format.
//!
//! Every key is optional except `protocol`. Nested tables: `[currents]`,
//! `[radio]`, `[link]`, `[overheads]`, `[cpu]` and `[timing]`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::CurrentProfile;
use crate::engine::{TickTime, RTIMER_HZ};
use crate::medium::Overheads;
use crate::protocols::QoS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    Mqtt,
    MqttSn,
    Coap,
    Http,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [
        Protocol::Mqtt,
        Protocol::MqttSn,
        Protocol::Coap,
        Protocol::Http,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Mqtt => "mqtt",
            Protocol::MqttSn => "mqtt-sn",
            Protocol::Coap => "coap",
            Protocol::Http => "http",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown protocol {s:?} (expected mqtt, mqtt-sn, coap or http)"))
    }
}

/// Radio duty cycling knobs. Every node uses the same schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadioConfig {
    pub duty_cycled: bool,
    pub check_rate_hz: f64,
    pub check_duration_ticks: u64,
}

impl Default for RadioConfig {
    fn default() -> Self {
        RadioConfig {
            duty_cycled: true,
            check_rate_hz: 8.0,
            check_duration_ticks: 24,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkConfig {
    pub range_m: f64,
    pub tx_success: f64,
    pub rx_success: f64,
    /// Distance between the server and each client when `positions` is empty.
    pub spacing_m: f64,
    /// Explicit coordinates: the server first, then one per client.
    pub positions: Vec<[f64; 2]>,
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig {
            range_m: 50.0,
            tx_success: 1.0,
            rx_success: 1.0,
            spacing_m: 10.0,
            positions: Vec::new(),
        }
    }
}

/// CPU-active ticks charged per application message built or parsed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CpuCost {
    pub ticks_per_message: u64,
    pub ticks_per_byte: u64,
}

impl Default for CpuCost {
    fn default() -> Self {
        CpuCost {
            ticks_per_message: 30,
            ticks_per_byte: 2,
        }
    }
}

impl CpuCost {
    pub fn ticks(&self, bytes: usize) -> u64 {
        self.ticks_per_message + self.ticks_per_byte * bytes as u64
    }
}

/// Protocol and transport timers, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingConfig {
    pub keep_alive_s: u16,
    pub ack_timeout_s: f64,
    pub max_tries: u32,
    pub coap_confirmable: bool,
    pub coap_ack_timeout_s: f64,
    pub coap_max_retransmit: u32,
    pub coap_token_len: usize,
    pub http_response_timeout_s: f64,
    pub stream_retransmit_s: f64,
    pub stream_max_retries: u32,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig {
            keep_alive_s: 30,
            ack_timeout_s: 5.0,
            max_tries: 3,
            coap_confirmable: true,
            coap_ack_timeout_s: 2.0,
            coap_max_retransmit: 4,
            coap_token_len: 2,
            http_response_timeout_s: 10.0,
            stream_retransmit_s: 0.5,
            stream_max_retries: 3,
        }
    }
}

impl TimingConfig {
    pub fn ticks(secs: f64) -> TickTime {
        TickTime::from_secs_f64(secs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub protocol: Protocol,
    #[serde(default = "defaults::duration_s")]
    pub duration_s: u64,
    #[serde(default = "defaults::interval_s")]
    pub interval_s: u64,
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    #[serde(default = "defaults::clients")]
    pub clients: usize,
    #[serde(default = "defaults::payload_bytes")]
    pub payload_bytes: usize,
    #[serde(default = "defaults::publish_period_s")]
    pub publish_period_s: f64,
    #[serde(default)]
    pub first_publish_s: f64,
    #[serde(default)]
    pub qos: QoS,
    #[serde(default)]
    pub topic: Topic,
    #[serde(default)]
    pub currents: CurrentProfile,
    #[serde(default)]
    pub radio: RadioConfig,
    #[serde(default)]
    pub link: LinkConfig,
    #[serde(default)]
    pub overheads: Overheads,
    #[serde(default)]
    pub cpu: CpuCost,
    #[serde(default)]
    pub timing: TimingConfig,
}

/// Topic name for MQTT and MQTT-SN, also used as the CoAP and HTTP resource.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Topic(pub String);

impl Default for Topic {
    fn default() -> Self {
        Topic("temperature".into())
    }
}

mod defaults {
    pub fn duration_s() -> u64 {
        100
    }
    pub fn interval_s() -> u64 {
        10
    }
    pub fn seed() -> u64 {
        1
    }
    pub fn clients() -> usize {
        1
    }
    pub fn payload_bytes() -> usize {
        30
    }
    pub fn publish_period_s() -> f64 {
        5.0
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("{}{msg}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Invalid { line: Option<usize>, msg: String },
}

impl ScenarioConfig {
    pub fn new(protocol: Protocol) -> Self {
        ScenarioConfig {
            protocol,
            duration_s: defaults::duration_s(),
            interval_s: defaults::interval_s(),
            seed: defaults::seed(),
            clients: defaults::clients(),
            payload_bytes: defaults::payload_bytes(),
            publish_period_s: defaults::publish_period_s(),
            first_publish_s: 0.0,
            qos: QoS::AtLeastOnce,
            topic: Topic::default(),
            currents: CurrentProfile::default(),
            radio: RadioConfig::default(),
            link: LinkConfig::default(),
            overheads: Overheads::default(),
            cpu: CpuCost::default(),
            timing: TimingConfig::default(),
        }
    }

    /// Checks cross-field rules. Errors name the offending key.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if self.interval_s == 0 || self.duration_s == 0 {
            return Err((
                "interval_s",
                "duration_s and interval_s must be positive".into(),
            ));
        }
        if self.interval_s > self.duration_s || !self.duration_s.is_multiple_of(self.interval_s) {
            return Err((
                "interval_s",
                format!(
                    "duration_s ({}) must be a positive multiple of interval_s ({})",
                    self.duration_s, self.interval_s
                ),
            ));
        }
        if self.clients == 0 || self.clients >= u16::MAX as usize {
            return Err((
                "clients",
                format!("clients must be at least 1, got {}", self.clients),
            ));
        }
        if !(self.publish_period_s > 0.0 && self.publish_period_s.is_finite()) {
            return Err((
                "publish_period_s",
                "publish_period_s must be positive".into(),
            ));
        }
        if !(self.first_publish_s >= 0.0 && self.first_publish_s.is_finite()) {
            return Err(("first_publish_s", "first_publish_s must be >= 0".into()));
        }
        self.currents
            .validate()
            .map_err(|e| (currents_key(&self.currents), e.to_string()))?;
        if self.currents.rtimer_hz != RTIMER_HZ {
            return Err((
                "rtimer_hz",
                format!("rtimer_hz must be {RTIMER_HZ}; the engine clock is fixed"),
            ));
        }
        self.overheads.validate().map_err(|e| ("overheads", e))?;
        let max_payload = match self.protocol {
            Protocol::Mqtt | Protocol::Http => usize::MAX,
            Protocol::MqttSn | Protocol::Coap => {
                self.overheads.max_datagram_payload().saturating_sub(20)
            }
        };
        if self.payload_bytes > max_payload {
            return Err((
                "payload_bytes",
                format!(
                    "payload_bytes {} does not fit one datagram",
                    self.payload_bytes
                ),
            ));
        }
        for (key, p) in [
            ("tx_success", self.link.tx_success),
            ("rx_success", self.link.rx_success),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err((key, format!("{key} must lie in [0, 1], got {p}")));
            }
        }
        if self.link.range_m.is_nan() || self.link.range_m < 0.0 {
            return Err(("range_m", "range_m must be >= 0".into()));
        }
        if !self.link.positions.is_empty() && self.link.positions.len() != self.clients + 1 {
            return Err((
                "positions",
                format!(
                    "positions needs {} entries (server + clients)",
                    self.clients + 1
                ),
            ));
        }
        if self.radio.duty_cycled {
            if !(self.radio.check_rate_hz > 0.0 && self.radio.check_rate_hz <= RTIMER_HZ as f64) {
                return Err((
                    "check_rate_hz",
                    "check_rate_hz must be in (0, 32768]".into(),
                ));
            }
            let period = (RTIMER_HZ as f64 / self.radio.check_rate_hz).round() as u64;
            if self.radio.check_duration_ticks >= period {
                return Err((
                    "check_duration_ticks",
                    format!("check_duration_ticks must be below the {period}-tick check period"),
                ));
            }
        }
        let t = &self.timing;
        for (key, v) in [
            ("ack_timeout_s", t.ack_timeout_s),
            ("coap_ack_timeout_s", t.coap_ack_timeout_s),
            ("http_response_timeout_s", t.http_response_timeout_s),
            ("stream_retransmit_s", t.stream_retransmit_s),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err((key, format!("{key} must be positive")));
            }
        }
        if t.max_tries == 0 {
            return Err(("max_tries", "max_tries must be at least 1".into()));
        }
        if t.coap_token_len > crate::protocols::coap::MAX_TOKEN {
            return Err(("coap_token_len", "coap_token_len must be at most 8".into()));
        }
        Ok(())
    }

    /// Node positions: the server at the origin, then the clients.
    pub fn positions(&self) -> Vec<(f64, f64)> {
        if !self.link.positions.is_empty() {
            return self.link.positions.iter().map(|p| (p[0], p[1])).collect();
        }
        let mut out = vec![(0.0, 0.0)];
        for i in 0..self.clients {
            let angle = std::f64::consts::TAU * i as f64 / self.clients as f64;
            out.push((
                self.link.spacing_m * angle.cos(),
                self.link.spacing_m * angle.sin(),
            ));
        }
        out
    }

    pub fn rows(&self) -> u64 {
        self.duration_s / self.interval_s
    }
}

fn currents_key(c: &CurrentProfile) -> &'static str {
    let bad = |v: f64| !(v >= 0.0 && v.is_finite());
    match () {
        _ if bad(c.cpu_active_ma) => "cpu_active_ma",
        _ if bad(c.lpm_ma) => "lpm_ma",
        _ if bad(c.tx_ma) => "tx_ma",
        _ if bad(c.rx_ma) => "rx_ma",
        _ if c.voltage_v.is_nan() || c.voltage_v <= 0.0 => "voltage_v",
        _ if c.rtimer_hz == 0 => "rtimer_hz",
        _ => "lpm_ma",
    }
}

/// 1-based line of the first assignment to `key`, if present.
fn line_of(src: &str, key: &str) -> Option<usize> {
    src.lines()
        .position(|l| {
            let l = l.trim_start();
            l.strip_prefix(key)
                .is_some_and(|rest| rest.trim_start().starts_with('='))
        })
        .map(|i| i + 1)
}

pub fn parse_scenario(src: &str) -> Result<ScenarioConfig, ConfigError> {
    let cfg: ScenarioConfig = toml::from_str(src).map_err(|e| {
        let line = e
            .span()
            .map(|s| src[..s.start.min(src.len())].lines().count().max(1));
        let msg = e.message().trim().to_owned();
        match line {
            Some(l) => ConfigError::Parse(format!("line {l}: {msg}")),
            None => ConfigError::Parse(msg),
        }
    })?;
    cfg.validate().map_err(|(key, msg)| ConfigError::Invalid {
        line: line_of(src, key),
        msg,
    })?;
    Ok(cfg)
}

pub fn load_scenario(path: &Path) -> Result<ScenarioConfig, ConfigError> {
    let src = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scenario(&src).map_err(|e| match e {
        ConfigError::Parse(m) => ConfigError::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}
