//! MQTT-SN 1.2 subset: codec, registering publisher, topic registry, and a
//! transparent gateway that speaks MQTT to a co-hosted broker.

use std::collections::{BTreeMap, HashMap, VecDeque};

use thiserror::Error;

use super::{malformed, mqtt, CodecError, MsgIdCounter, Notice, Output, QoS};
use crate::engine::TickTime;

const CONNECT: u8 = 0x04;
const CONNACK: u8 = 0x05;
const REGISTER: u8 = 0x0A;
const REGACK: u8 = 0x0B;
const PUBLISH: u8 = 0x0C;
const PUBACK: u8 = 0x0D;

const FLAG_DUP: u8 = 0x80;
const FLAG_RETAIN: u8 = 0x10;
const FLAG_CLEAN: u8 = 0x04;
const PROTOCOL_ID: u8 = 0x01;

pub const RC_ACCEPTED: u8 = 0x00;
pub const RC_INVALID_TOPIC: u8 = 0x02;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Publish {
    pub dup: bool,
    pub qos: QoS,
    pub retain: bool,
    pub topic_id: u16,
    pub msg_id: u16,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Packet {
    Connect {
        clean_session: bool,
        duration: u16,
        client_id: String,
    },
    ConnAck {
        code: u8,
    },
    Register {
        topic_id: u16,
        msg_id: u16,
        topic: String,
    },
    RegAck {
        topic_id: u16,
        msg_id: u16,
        code: u8,
    },
    Publish(Publish),
    PubAck {
        topic_id: u16,
        msg_id: u16,
        code: u8,
    },
}

impl Packet {
    pub fn encode(&self) -> Vec<u8> {
        let mut body = Vec::new();
        let kind = match self {
            Packet::Connect {
                clean_session,
                duration,
                client_id,
            } => {
                body.push(if *clean_session { FLAG_CLEAN } else { 0 });
                body.push(PROTOCOL_ID);
                body.extend_from_slice(&duration.to_be_bytes());
                body.extend_from_slice(client_id.as_bytes());
                CONNECT
            }
            Packet::ConnAck { code } => {
                body.push(*code);
                CONNACK
            }
            Packet::Register {
                topic_id,
                msg_id,
                topic,
            } => {
                body.extend_from_slice(&topic_id.to_be_bytes());
                body.extend_from_slice(&msg_id.to_be_bytes());
                body.extend_from_slice(topic.as_bytes());
                REGISTER
            }
            Packet::RegAck {
                topic_id,
                msg_id,
                code,
            }
            | Packet::PubAck {
                topic_id,
                msg_id,
                code,
            } => {
                body.extend_from_slice(&topic_id.to_be_bytes());
                body.extend_from_slice(&msg_id.to_be_bytes());
                body.push(*code);
                if matches!(self, Packet::RegAck { .. }) {
                    REGACK
                } else {
                    PUBACK
                }
            }
            Packet::Publish(p) => {
                let mut flags = p.qos.bits() << 5;
                if p.dup {
                    flags |= FLAG_DUP;
                }
                if p.retain {
                    flags |= FLAG_RETAIN;
                }
                body.push(flags);
                body.extend_from_slice(&p.topic_id.to_be_bytes());
                body.extend_from_slice(&p.msg_id.to_be_bytes());
                body.extend_from_slice(&p.payload);
                PUBLISH
            }
        };
        let mut out = Vec::with_capacity(body.len() + 4);
        if body.len() + 2 < 256 {
            out.push((body.len() + 2) as u8);
        } else {
            out.push(0x01);
            out.extend_from_slice(&((body.len() + 4) as u16).to_be_bytes());
        }
        out.push(kind);
        out.extend_from_slice(&body);
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Packet, CodecError> {
        let (&first, _) = buf.split_first().ok_or(CodecError::Truncated)?;
        let (len, hdr) = if first == 0x01 {
            if buf.len() < 3 {
                return Err(CodecError::Truncated);
            }
            (u16::from_be_bytes([buf[1], buf[2]]) as usize, 3)
        } else {
            (first as usize, 1)
        };
        if len < hdr + 1 {
            return malformed(format!("length field {len} too small"));
        }
        if buf.len() < len {
            return Err(CodecError::Truncated);
        }
        if buf.len() > len {
            return Err(CodecError::Trailing(buf.len() - len));
        }
        let kind = buf[hdr];
        let b = &buf[hdr + 1..];
        let need = |n: usize| {
            if b.len() < n {
                Err(CodecError::Truncated)
            } else {
                Ok(())
            }
        };
        let u16_at = |i: usize| u16::from_be_bytes([b[i], b[i + 1]]);
        let text =
            |s: &[u8]| String::from_utf8(s.to_vec()).or_else(|_| malformed("string is not UTF-8"));
        let exact = |n: usize| match b.len() {
            l if l < n => Err(CodecError::Truncated),
            l if l > n => Err(CodecError::Trailing(l - n)),
            _ => Ok(()),
        };
        Ok(match kind {
            CONNECT => {
                need(4)?;
                if b[1] != PROTOCOL_ID {
                    return Err(CodecError::Unsupported(format!("protocol id {:#x}", b[1])));
                }
                if b[0] & !FLAG_CLEAN != 0 {
                    return Err(CodecError::Unsupported(format!(
                        "connect flags {:#x}",
                        b[0]
                    )));
                }
                Packet::Connect {
                    clean_session: b[0] & FLAG_CLEAN != 0,
                    duration: u16_at(2),
                    client_id: text(&b[4..])?,
                }
            }
            CONNACK => {
                exact(1)?;
                Packet::ConnAck { code: b[0] }
            }
            REGISTER => {
                need(4)?;
                Packet::Register {
                    topic_id: u16_at(0),
                    msg_id: u16_at(2),
                    topic: text(&b[4..])?,
                }
            }
            REGACK | PUBACK => {
                exact(5)?;
                let (topic_id, msg_id, code) = (u16_at(0), u16_at(2), b[4]);
                if kind == REGACK {
                    Packet::RegAck {
                        topic_id,
                        msg_id,
                        code,
                    }
                } else {
                    Packet::PubAck {
                        topic_id,
                        msg_id,
                        code,
                    }
                }
            }
            PUBLISH => {
                need(5)?;
                let flags = b[0];
                if flags & 0x63 != flags & 0x60 {
                    return Err(CodecError::Unsupported(format!("publish flags {flags:#x}")));
                }
                let qos = QoS::try_from((flags >> 5) & 0x03).map_err(CodecError::Unsupported)?;
                Packet::Publish(Publish {
                    dup: flags & FLAG_DUP != 0,
                    qos,
                    retain: flags & FLAG_RETAIN != 0,
                    topic_id: u16_at(1),
                    msg_id: u16_at(3),
                    payload: b[5..].to_vec(),
                })
            }
            other => return Err(CodecError::Unsupported(format!("message type {other:#x}"))),
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistryError {
    #[error("topic id space exhausted")]
    Exhausted,
    #[error("unknown topic id {0}")]
    UnknownTopicId(u16),
    #[error("unregistered topic {0:?}")]
    UnknownTopic(String),
}

/// Topic string to 16-bit id mapping; ids run 1..=0xFFFE.
#[derive(Debug, Clone, Default)]
pub struct TopicRegistry {
    by_name: HashMap<String, u16>,
    by_id: BTreeMap<u16, String>,
}

impl TopicRegistry {
    /// Returns the existing id for `topic` or assigns the next free one.
    pub fn register(&mut self, topic: &str) -> Result<u16, RegistryError> {
        if let Some(&id) = self.by_name.get(topic) {
            return Ok(id);
        }
        let id = self.by_id.len() + 1;
        if id > 0xFFFE {
            return Err(RegistryError::Exhausted);
        }
        let id = id as u16;
        self.by_name.insert(topic.to_owned(), id);
        self.by_id.insert(id, topic.to_owned());
        Ok(id)
    }

    pub fn topic(&self, id: u16) -> Option<&str> {
        self.by_id.get(&id).map(String::as_str)
    }

    pub fn id(&self, topic: &str) -> Option<u16> {
        self.by_name.get(topic).copied()
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

/// SN PUBLISH to MQTT PUBLISH with the topic string substituted.
pub fn to_mqtt(p: &Publish, registry: &TopicRegistry) -> Result<mqtt::Publish, RegistryError> {
    let topic = registry
        .topic(p.topic_id)
        .ok_or(RegistryError::UnknownTopicId(p.topic_id))?;
    Ok(mqtt::Publish {
        dup: p.dup,
        qos: p.qos,
        retain: p.retain,
        topic: topic.to_owned(),
        msg_id: if p.qos == QoS::AtLeastOnce {
            p.msg_id
        } else {
            0
        },
        payload: p.payload.clone(),
    })
}

/// MQTT PUBLISH to SN PUBLISH; the topic must already be registered.
pub fn from_mqtt(p: &mqtt::Publish, registry: &TopicRegistry) -> Result<Publish, RegistryError> {
    let topic_id = registry
        .id(&p.topic)
        .ok_or_else(|| RegistryError::UnknownTopic(p.topic.clone()))?;
    Ok(Publish {
        dup: p.dup,
        qos: p.qos,
        retain: p.retain,
        topic_id,
        msg_id: p.msg_id,
        payload: p.payload.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientConfig {
    pub client_id: String,
    pub topic: String,
    pub qos: QoS,
    pub duration_s: u16,
    pub ack_timeout: TickTime,
    pub max_tries: u32,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            client_id: "z1-client".into(),
            topic: "temperature".into(),
            qos: QoS::AtLeastOnce,
            duration_s: 30,
            ack_timeout: TickTime::from_secs(5),
            max_tries: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClientTimer {
    Connack,
    Regack,
    Retransmit(u16),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientInput {
    AppPublish(Vec<u8>),
    Inbound(Packet),
    Timer(ClientTimer),
}

pub type ClientOutput = Output<Packet, ClientTimer>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientPhase {
    Disconnected,
    AwaitConnack,
    Registering,
    Up,
}

#[derive(Debug, Clone)]
pub struct Client {
    cfg: ClientConfig,
    phase: ClientPhase,
    ids: MsgIdCounter,
    topic_id: Option<u16>,
    /// Tries spent on the pending CONNECT or REGISTER.
    setup_tries: u32,
    register_id: u16,
    queued: VecDeque<Vec<u8>>,
    in_flight: BTreeMap<u16, (Publish, u32)>,
}

impl Client {
    pub fn new(cfg: ClientConfig) -> Self {
        Client {
            cfg,
            phase: ClientPhase::Disconnected,
            ids: MsgIdCounter::default(),
            topic_id: None,
            setup_tries: 0,
            register_id: 0,
            queued: VecDeque::new(),
            in_flight: BTreeMap::new(),
        }
    }

    pub fn phase(&self) -> ClientPhase {
        self.phase
    }

    pub fn topic_id(&self) -> Option<u16> {
        self.topic_id
    }

    pub fn step(&mut self, input: ClientInput) -> Vec<ClientOutput> {
        let mut out = Vec::new();
        match input {
            ClientInput::AppPublish(payload) => match self.phase {
                ClientPhase::Up => self.publish(payload, &mut out),
                ClientPhase::Disconnected => {
                    self.queued.push_back(payload);
                    self.setup_tries = 1;
                    self.send_connect(&mut out);
                }
                _ => self.queued.push_back(payload),
            },
            ClientInput::Inbound(p) => self.on_packet(p, &mut out),
            ClientInput::Timer(t) => self.on_timer(t, &mut out),
        }
        out
    }

    fn send_connect(&mut self, out: &mut Vec<ClientOutput>) {
        self.phase = ClientPhase::AwaitConnack;
        out.push(Output::Send(Packet::Connect {
            clean_session: true,
            duration: self.cfg.duration_s,
            client_id: self.cfg.client_id.clone(),
        }));
        out.push(Output::SetTimer(ClientTimer::Connack, self.cfg.ack_timeout));
    }

    fn send_register(&mut self, out: &mut Vec<ClientOutput>) {
        self.phase = ClientPhase::Registering;
        out.push(Output::Send(Packet::Register {
            topic_id: 0,
            msg_id: self.register_id,
            topic: self.cfg.topic.clone(),
        }));
        out.push(Output::SetTimer(ClientTimer::Regack, self.cfg.ack_timeout));
    }

    fn publish(&mut self, payload: Vec<u8>, out: &mut Vec<ClientOutput>) {
        let topic_id = self
            .topic_id
            .expect("publishing requires a registered topic");
        let msg_id = match self.cfg.qos {
            QoS::AtMostOnce => 0,
            QoS::AtLeastOnce => self.ids.next_id(),
        };
        let p = Publish {
            dup: false,
            qos: self.cfg.qos,
            retain: false,
            topic_id,
            msg_id,
            payload,
        };
        if self.cfg.qos == QoS::AtLeastOnce {
            self.in_flight.insert(msg_id, (p.clone(), 1));
            out.push(Output::SetTimer(
                ClientTimer::Retransmit(msg_id),
                self.cfg.ack_timeout,
            ));
        }
        out.push(Output::Send(Packet::Publish(p)));
    }

    fn fail_setup(&mut self, out: &mut Vec<ClientOutput>) {
        self.phase = ClientPhase::Disconnected;
        self.queued.clear();
        out.push(Output::Notify(Notice::ConnectionFailed));
    }

    fn on_packet(&mut self, packet: Packet, out: &mut Vec<ClientOutput>) {
        match packet {
            Packet::ConnAck { code } if self.phase == ClientPhase::AwaitConnack => {
                out.push(Output::CancelTimer(ClientTimer::Connack));
                if code != RC_ACCEPTED {
                    self.fail_setup(out);
                    return;
                }
                out.push(Output::Notify(Notice::SessionUp));
                if self.topic_id.is_some() {
                    self.phase = ClientPhase::Up;
                    self.flush(out);
                } else {
                    self.setup_tries = 1;
                    self.register_id = self.ids.next_id();
                    self.send_register(out);
                }
            }
            Packet::RegAck {
                topic_id,
                msg_id,
                code,
            } if self.phase == ClientPhase::Registering && msg_id == self.register_id => {
                out.push(Output::CancelTimer(ClientTimer::Regack));
                if code != RC_ACCEPTED {
                    self.fail_setup(out);
                    return;
                }
                self.topic_id = Some(topic_id);
                self.phase = ClientPhase::Up;
                out.push(Output::Notify(Notice::Registered {
                    topic: self.cfg.topic.clone(),
                    topic_id,
                }));
                self.flush(out);
            }
            Packet::PubAck { msg_id, code, .. } => {
                if self.in_flight.remove(&msg_id).is_some() {
                    out.push(Output::CancelTimer(ClientTimer::Retransmit(msg_id)));
                    out.push(Output::Notify(if code == RC_ACCEPTED {
                        Notice::Delivered { msg_id }
                    } else {
                        Notice::PublishFailed { msg_id }
                    }));
                }
            }
            other => out.push(Output::Notify(Notice::Dropped(format!(
                "unexpected {other:?}"
            )))),
        }
    }

    fn flush(&mut self, out: &mut Vec<ClientOutput>) {
        while let Some(payload) = self.queued.pop_front() {
            self.publish(payload, out);
        }
    }

    fn on_timer(&mut self, timer: ClientTimer, out: &mut Vec<ClientOutput>) {
        match timer {
            ClientTimer::Connack | ClientTimer::Regack => {
                let waiting = match timer {
                    ClientTimer::Connack => ClientPhase::AwaitConnack,
                    _ => ClientPhase::Registering,
                };
                if self.phase != waiting {
                    return;
                }
                if self.setup_tries >= self.cfg.max_tries {
                    self.fail_setup(out);
                } else {
                    self.setup_tries += 1;
                    if waiting == ClientPhase::AwaitConnack {
                        self.send_connect(out);
                    } else {
                        self.send_register(out);
                    }
                }
            }
            ClientTimer::Retransmit(msg_id) => {
                let Some((p, tries)) = self.in_flight.get_mut(&msg_id) else {
                    return;
                };
                if *tries < self.cfg.max_tries {
                    *tries += 1;
                    p.dup = true;
                    out.push(Output::SetTimer(timer, self.cfg.ack_timeout));
                    out.push(Output::Send(Packet::Publish(p.clone())));
                } else {
                    self.in_flight.remove(&msg_id);
                    out.push(Output::Notify(Notice::PublishFailed { msg_id }));
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GatewayOutput<A> {
    ToClient(A, Packet),
    /// MQTT packet for the broker session that stands in for client `A`.
    ToBroker(A, mqtt::Packet),
    Diagnostic(String),
}

/// Transparent gateway: one broker session per MQTT-SN client.
#[derive(Debug, Clone)]
pub struct Gateway<A: Ord> {
    registry: TopicRegistry,
    /// Outstanding publishes per client, to map broker PUBACKs back to topic ids.
    pending: BTreeMap<A, HashMap<u16, u16>>,
}

impl<A: Clone + Ord + std::fmt::Debug> Default for Gateway<A> {
    fn default() -> Self {
        Self::new()
    }
}

impl<A: Clone + Ord + std::fmt::Debug> Gateway<A> {
    pub fn new() -> Self {
        Gateway {
            registry: TopicRegistry::default(),
            pending: BTreeMap::new(),
        }
    }

    pub fn registry(&self) -> &TopicRegistry {
        &self.registry
    }

    pub fn from_client(&mut self, from: A, packet: Packet) -> Vec<GatewayOutput<A>> {
        let mut out = Vec::new();
        match packet {
            Packet::Connect {
                clean_session,
                duration,
                client_id,
            } => {
                self.pending.insert(from.clone(), HashMap::new());
                out.push(GatewayOutput::ToBroker(
                    from,
                    mqtt::Packet::Connect {
                        client_id,
                        keep_alive: duration,
                        clean_session,
                    },
                ));
            }
            Packet::Register { msg_id, topic, .. } => {
                let (topic_id, code) = match self.registry.register(&topic) {
                    Ok(id) => (id, RC_ACCEPTED),
                    Err(e) => {
                        out.push(GatewayOutput::Diagnostic(e.to_string()));
                        (0, RC_INVALID_TOPIC)
                    }
                };
                out.push(GatewayOutput::ToClient(
                    from,
                    Packet::RegAck {
                        topic_id,
                        msg_id,
                        code,
                    },
                ));
            }
            Packet::Publish(p) => match to_mqtt(&p, &self.registry) {
                Ok(m) => {
                    if p.qos == QoS::AtLeastOnce {
                        self.pending
                            .entry(from.clone())
                            .or_default()
                            .insert(p.msg_id, p.topic_id);
                    }
                    out.push(GatewayOutput::ToBroker(from, mqtt::Packet::Publish(m)));
                }
                Err(e) => {
                    out.push(GatewayOutput::Diagnostic(format!(
                        "dropping publish from {from:?}: {e}"
                    )));
                    if p.qos == QoS::AtLeastOnce {
                        let ack = Packet::PubAck {
                            topic_id: p.topic_id,
                            msg_id: p.msg_id,
                            code: RC_INVALID_TOPIC,
                        };
                        out.push(GatewayOutput::ToClient(from, ack));
                    }
                }
            },
            Packet::PubAck { msg_id, .. } => out.push(GatewayOutput::ToBroker(
                from,
                mqtt::Packet::PubAck { msg_id },
            )),
            other => out.push(GatewayOutput::Diagnostic(format!(
                "unexpected {other:?} from {from:?}"
            ))),
        }
        out
    }

    pub fn from_broker(&mut self, to: A, packet: mqtt::Packet) -> Vec<GatewayOutput<A>> {
        let mut out = Vec::new();
        match packet {
            mqtt::Packet::ConnAck { code, .. } => {
                out.push(GatewayOutput::ToClient(to, Packet::ConnAck { code }))
            }
            mqtt::Packet::PubAck { msg_id } => {
                let topic_id = self
                    .pending
                    .get_mut(&to)
                    .and_then(|m| m.remove(&msg_id))
                    .unwrap_or(0);
                out.push(GatewayOutput::ToClient(
                    to,
                    Packet::PubAck {
                        topic_id,
                        msg_id,
                        code: RC_ACCEPTED,
                    },
                ));
            }
            mqtt::Packet::Publish(p) => {
                let topic_id = match self.registry.register(&p.topic) {
                    Ok(id) => id,
                    Err(e) => {
                        out.push(GatewayOutput::Diagnostic(e.to_string()));
                        return out;
                    }
                };
                let sn = from_mqtt(&p, &self.registry).expect("topic registered above");
                debug_assert_eq!(sn.topic_id, topic_id);
                out.push(GatewayOutput::ToClient(to, Packet::Publish(sn)));
            }
            mqtt::Packet::SubAck { .. } | mqtt::Packet::PingResp => {}
            other => out.push(GatewayOutput::Diagnostic(format!(
                "unexpected broker packet {other:?}"
            ))),
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocols::sent;
    use proptest::prelude::*;

    #[test]
    fn publish_size() {
        let p = Packet::Publish(Publish {
            dup: false,
            qos: QoS::AtLeastOnce,
            retain: false,
            topic_id: 7,
            msg_id: 1,
            payload: vec![1, 2, 3],
        });
        assert_eq!(p.encode().len(), 10);
    }

    #[test]
    fn long_length_form() {
        let p = Packet::Publish(Publish {
            dup: false,
            qos: QoS::AtMostOnce,
            retain: false,
            topic_id: 1,
            msg_id: 0,
            payload: vec![0; 300],
        });
        let bytes = p.encode();
        assert_eq!(bytes[0], 0x01);
        assert_eq!(
            u16::from_be_bytes([bytes[1], bytes[2]]) as usize,
            bytes.len()
        );
        assert_eq!(Packet::decode(&bytes), Ok(p));
    }

    #[test]
    fn decode_errors() {
        let bytes = Packet::ConnAck { code: 0 }.encode();
        assert_eq!(Packet::decode(&bytes[..2]), Err(CodecError::Truncated));
        assert_eq!(Packet::decode(&[3, 0x7F, 0]).map_err(|_| ()), Err(()));
        assert_eq!(Packet::decode(&[1]), Err(CodecError::Truncated));
    }

    #[test]
    fn registry_is_idempotent() {
        let mut r = TopicRegistry::default();
        let a = r.register("temperature").unwrap();
        assert_eq!(r.register("humidity").unwrap(), a + 1);
        assert_eq!(r.register("temperature").unwrap(), a);
        assert_eq!(r.len(), 2);
    }

    #[test]
    fn translate_substitutes_topic() {
        let mut r = TopicRegistry::default();
        for i in 0..6 {
            r.register(&format!("x{i}")).unwrap();
        }
        assert_eq!(r.register("t").unwrap(), 7);
        let sn = Publish {
            dup: false,
            qos: QoS::AtMostOnce,
            retain: false,
            topic_id: 7,
            msg_id: 0,
            payload: b"p".to_vec(),
        };
        let m = to_mqtt(&sn, &r).unwrap();
        assert_eq!((m.topic.as_str(), m.payload.as_slice()), ("t", &b"p"[..]));
        let unknown = Publish { topic_id: 99, ..sn };
        assert_eq!(
            to_mqtt(&unknown, &r),
            Err(RegistryError::UnknownTopicId(99))
        );
    }

    fn up_client() -> (Client, u16) {
        let mut c = Client::new(ClientConfig::default());
        c.step(ClientInput::AppPublish(b"first".to_vec()));
        c.step(ClientInput::Inbound(Packet::ConnAck { code: 0 }));
        let out = c.step(ClientInput::Inbound(Packet::RegAck {
            topic_id: 1,
            msg_id: 1,
            code: 0,
        }));
        let Packet::Publish(p) = sent(&out)[0] else {
            panic!()
        };
        (c, p.msg_id)
    }

    #[test]
    fn setup_order_and_queueing() {
        let mut c = Client::new(ClientConfig::default());
        let out = c.step(ClientInput::AppPublish(b"a".to_vec()));
        assert!(matches!(sent(&out)[..], [Packet::Connect { .. }]));
        let out = c.step(ClientInput::Inbound(Packet::ConnAck { code: 0 }));
        assert!(matches!(sent(&out)[..], [Packet::Register { .. }]));
        let out = c.step(ClientInput::AppPublish(b"b".to_vec()));
        assert!(sent(&out).is_empty(), "queued until REGACK");
        let out = c.step(ClientInput::Inbound(Packet::RegAck {
            topic_id: 3,
            msg_id: 1,
            code: 0,
        }));
        let pubs: Vec<_> = sent(&out).into_iter().cloned().collect();
        assert_eq!(pubs.len(), 2);
        for p in pubs {
            let Packet::Publish(p) = p else { panic!() };
            assert_eq!(p.topic_id, 3);
        }
    }

    #[test]
    fn topic_id_saves_bytes_over_string() {
        let (mut c, _) = up_client();
        let out = c.step(ClientInput::AppPublish(vec![0; 30]));
        let bytes = sent(&out)[0].encode();
        let mqtt_bytes = mqtt::Packet::Publish(mqtt::Publish {
            dup: false,
            qos: QoS::AtLeastOnce,
            retain: false,
            topic: "temperature".into(),
            msg_id: 2,
            payload: vec![0; 30],
        })
        .encode();
        assert!(!bytes.windows(11).any(|w| w == b"temperature"));
        assert_eq!(
            (mqtt_bytes.len(), bytes.len()),
            (2 + 2 + 11 + 2 + 30, 1 + 1 + 1 + 2 + 2 + 30)
        );
    }

    #[test]
    fn regack_timeout_retries_then_fails() {
        let mut c = Client::new(ClientConfig::default());
        c.step(ClientInput::AppPublish(b"a".to_vec()));
        c.step(ClientInput::Inbound(Packet::ConnAck { code: 0 }));
        for _ in 0..2 {
            let out = c.step(ClientInput::Timer(ClientTimer::Regack));
            assert!(matches!(sent(&out)[..], [Packet::Register { .. }]));
        }
        let out = c.step(ClientInput::Timer(ClientTimer::Regack));
        assert_eq!(out, vec![Output::Notify(Notice::ConnectionFailed)]);
    }

    #[test]
    fn puback_clears_and_retry_sets_dup() {
        let (mut c, id) = up_client();
        let out = c.step(ClientInput::Timer(ClientTimer::Retransmit(id)));
        let Packet::Publish(p) = sent(&out)[0] else {
            panic!()
        };
        assert!(p.dup);
        let out = c.step(ClientInput::Inbound(Packet::PubAck {
            topic_id: 1,
            msg_id: id,
            code: 0,
        }));
        assert!(out.contains(&Output::Notify(Notice::Delivered { msg_id: id })));
        assert!(c
            .step(ClientInput::Timer(ClientTimer::Retransmit(id)))
            .is_empty());
    }

    #[test]
    fn gateway_flow() {
        let mut g: Gateway<u8> = Gateway::new();
        let out = g.from_client(
            1,
            Packet::Connect {
                clean_session: true,
                duration: 30,
                client_id: "c".into(),
            },
        );
        assert!(matches!(
            out[..],
            [GatewayOutput::ToBroker(1, mqtt::Packet::Connect { .. })]
        ));
        let out = g.from_broker(
            1,
            mqtt::Packet::ConnAck {
                session_present: false,
                code: 0,
            },
        );
        assert_eq!(
            out,
            vec![GatewayOutput::ToClient(1, Packet::ConnAck { code: 0 })]
        );
        let out = g.from_client(
            1,
            Packet::Register {
                topic_id: 0,
                msg_id: 4,
                topic: "t".into(),
            },
        );
        assert_eq!(
            out,
            vec![GatewayOutput::ToClient(
                1,
                Packet::RegAck {
                    topic_id: 1,
                    msg_id: 4,
                    code: 0
                }
            )]
        );
        let p = Publish {
            dup: false,
            qos: QoS::AtLeastOnce,
            retain: false,
            topic_id: 1,
            msg_id: 5,
            payload: b"x".to_vec(),
        };
        let out = g.from_client(1, Packet::Publish(p));
        assert!(
            matches!(&out[..], [GatewayOutput::ToBroker(1, mqtt::Packet::Publish(m))] if m.topic == "t")
        );
        let out = g.from_broker(1, mqtt::Packet::PubAck { msg_id: 5 });
        assert_eq!(
            out,
            vec![GatewayOutput::ToClient(
                1,
                Packet::PubAck {
                    topic_id: 1,
                    msg_id: 5,
                    code: 0
                }
            )]
        );
        let bad = Publish {
            dup: false,
            qos: QoS::AtLeastOnce,
            retain: false,
            topic_id: 99,
            msg_id: 6,
            payload: vec![],
        };
        let out = g.from_client(1, Packet::Publish(bad));
        assert!(matches!(out[0], GatewayOutput::Diagnostic(_)));
        assert!(matches!(
            out[1],
            GatewayOutput::ToClient(
                1,
                Packet::PubAck {
                    code: RC_INVALID_TOPIC,
                    ..
                }
            )
        ));
    }

    fn arb_text(max: usize) -> impl Strategy<Value = String> {
        proptest::string::string_regex(&format!("[a-z0-9/_]{{0,{max}}}")).unwrap()
    }

    pub(crate) fn arb_packet() -> impl Strategy<Value = Packet> {
        let qos = prop_oneof![Just(QoS::AtMostOnce), Just(QoS::AtLeastOnce)];
        prop_oneof![
            (any::<bool>(), any::<u16>(), arb_text(23)).prop_map(
                |(clean_session, duration, client_id)| Packet::Connect {
                    clean_session,
                    duration,
                    client_id
                }
            ),
            any::<u8>().prop_map(|code| Packet::ConnAck { code }),
            (any::<u16>(), any::<u16>(), arb_text(40)).prop_map(|(topic_id, msg_id, topic)| {
                Packet::Register {
                    topic_id,
                    msg_id,
                    topic,
                }
            }),
            (any::<u16>(), any::<u16>(), any::<u8>()).prop_map(|(topic_id, msg_id, code)| {
                Packet::RegAck {
                    topic_id,
                    msg_id,
                    code,
                }
            }),
            (any::<u16>(), any::<u16>(), any::<u8>()).prop_map(|(topic_id, msg_id, code)| {
                Packet::PubAck {
                    topic_id,
                    msg_id,
                    code,
                }
            }),
            (
                any::<bool>(),
                qos,
                any::<bool>(),
                any::<u16>(),
                any::<u16>(),
                prop::collection::vec(any::<u8>(), 0..300)
            )
                .prop_map(|(dup, qos, retain, topic_id, msg_id, payload)| {
                    Packet::Publish(Publish {
                        dup,
                        qos,
                        retain,
                        topic_id,
                        msg_id,
                        payload,
                    })
                }),
        ]
    }

    proptest! {
        #[test]
        fn codec_roundtrip(p in arb_packet()) {
            prop_assert_eq!(Packet::decode(&p.encode()), Ok(p));
        }

        #[test]
        fn translate_roundtrip(topic in arb_text(20), qos in prop_oneof![Just(QoS::AtMostOnce), Just(QoS::AtLeastOnce)], id in 1u16.., payload in prop::collection::vec(any::<u8>(), 0..64)) {
            let mut r = TopicRegistry::default();
            let topic_id = r.register(&topic).unwrap();
            let msg_id = if qos == QoS::AtLeastOnce { id } else { 0 };
            let sn = Publish { dup: false, qos, retain: false, topic_id, msg_id, payload };
            let back = from_mqtt(&to_mqtt(&sn, &r).unwrap(), &r).unwrap();
            prop_assert_eq!(back, sn);
        }
    }
}
