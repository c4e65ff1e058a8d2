//! Reduced, wire-realistic application protocols as pure state machines.
//!
//! Every machine is stepped with one input and answers with a list of
//! [`Output`]s; timers and transports belong to whoever hosts the machine.

pub mod coap;
pub mod http;
pub mod mqtt;
pub mod mqttsn;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::TickTime;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("buffer truncated")]
    Truncated,
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("unsupported feature: {0}")]
    Unsupported(String),
    #[error("{0} trailing bytes after message")]
    Trailing(usize),
}

pub(crate) fn malformed<T>(what: impl Into<String>) -> Result<T, CodecError> {
    Err(CodecError::Malformed(what.into()))
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(try_from = "u8", into = "u8")]
pub enum QoS {
    AtMostOnce,
    #[default]
    AtLeastOnce,
}

impl QoS {
    pub fn bits(self) -> u8 {
        match self {
            QoS::AtMostOnce => 0,
            QoS::AtLeastOnce => 1,
        }
    }
}

impl TryFrom<u8> for QoS {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            0 => Ok(QoS::AtMostOnce),
            1 => Ok(QoS::AtLeastOnce),
            other => Err(format!("unsupported qos {other} (expected 0 or 1)")),
        }
    }
}

impl From<QoS> for u8 {
    fn from(q: QoS) -> u8 {
        q.bits()
    }
}

/// 16-bit message identifiers, starting at 1 and skipping 0 on wrap.
#[derive(Debug, Clone, Default)]
pub struct MsgIdCounter(u16);

impl MsgIdCounter {
    pub fn starting_after(last: u16) -> Self {
        MsgIdCounter(last)
    }

    pub fn next_id(&mut self) -> u16 {
        self.0 = self.0.wrapping_add(1);
        if self.0 == 0 {
            self.0 = 1;
        }
        self.0
    }
}

/// A message of any of the four protocols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProtocolMessage {
    Mqtt(mqtt::Packet),
    MqttSn(mqttsn::Packet),
    Coap(coap::Message),
    Http(http::HttpMessage),
}

impl ProtocolMessage {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            ProtocolMessage::Mqtt(p) => p.encode(),
            ProtocolMessage::MqttSn(p) => p.encode(),
            ProtocolMessage::Coap(m) => m.encode(),
            ProtocolMessage::Http(m) => m.encode(),
        }
    }

    pub fn protocol(&self) -> &'static str {
        match self {
            ProtocolMessage::Mqtt(_) => "mqtt",
            ProtocolMessage::MqttSn(_) => "mqtt-sn",
            ProtocolMessage::Coap(_) => "coap",
            ProtocolMessage::Http(_) => "http",
        }
    }
}

/// Outcomes a machine reports to its host.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Notice {
    SessionUp,
    ConnectionFailed,
    Registered { topic: String, topic_id: u16 },
    Delivered { msg_id: u16 },
    PublishFailed { msg_id: u16 },
    Received { topic: String, payload: Vec<u8> },
    Response { status: u16, payload: Vec<u8> },
    ExchangeFailed { msg_id: u16 },
    RequestFailed(String),
    Dropped(String),
}

impl Notice {
    pub fn is_failure(&self) -> bool {
        matches!(
            self,
            Notice::ConnectionFailed
                | Notice::PublishFailed { .. }
                | Notice::ExchangeFailed { .. }
                | Notice::RequestFailed(_)
        )
    }
}

/// One effect requested by a state machine step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Output<M, T> {
    /// Open the stream transport to the configured peer.
    Open,
    Send(M),
    /// Close the stream transport.
    Close,
    /// Arm `T` to fire after the given delay, replacing any pending instance.
    SetTimer(T, TickTime),
    CancelTimer(T),
    Notify(Notice),
}

impl<M, T> Output<M, T> {
    pub fn sent(&self) -> Option<&M> {
        match self {
            Output::Send(m) => Some(m),
            _ => None,
        }
    }
}

/// Collects the messages among a step's outputs.
pub fn sent<M, T>(outputs: &[Output<M, T>]) -> Vec<&M> {
    outputs.iter().filter_map(Output::sent).collect()
}

impl fmt::Display for QoS {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn msg_ids_start_at_one_and_skip_zero_on_wrap() {
        let mut ids = MsgIdCounter::default();
        assert_eq!(ids.next_id(), 1);
        let mut ids = MsgIdCounter::starting_after(u16::MAX - 1);
        assert_eq!(ids.next_id(), u16::MAX);
        assert_eq!(ids.next_id(), 1);
    }

    #[test]
    fn qos_parsing() {
        assert_eq!(QoS::try_from(1), Ok(QoS::AtLeastOnce));
        assert!(QoS::try_from(2).is_err());
    }
}
