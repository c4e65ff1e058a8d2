//! MQTT 3.1.1 subset: codec, publishing client, and a small broker.
//!
//! Wire layout: 2-byte fixed header (type/flags, remaining length), a 10-byte
//! CONNECT variable header, length-prefixed UTF-8 strings, and a 2-byte
//! message id on QoS 1 publishes. QoS 2, wills, credentials and retained
//! messages are not supported.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::hash::Hash;

use super::{malformed, CodecError, MsgIdCounter, Notice, Output, QoS};
use crate::engine::TickTime;

const CONNECT: u8 = 1;
const CONNACK: u8 = 2;
const PUBLISH: u8 = 3;
const PUBACK: u8 = 4;
const SUBSCRIBE: u8 = 8;
const SUBACK: u8 = 9;
const PINGREQ: u8 = 12;
const PINGRESP: u8 = 13;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Publish {
    pub dup: bool,
    pub qos: QoS,
    pub retain: bool,
    pub topic: String,
    /// On the wire only for QoS 1; zero otherwise.
    pub msg_id: u16,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Packet {
    Connect {
        client_id: String,
        keep_alive: u16,
        clean_session: bool,
    },
    ConnAck {
        session_present: bool,
        code: u8,
    },
    Publish(Publish),
    PubAck {
        msg_id: u16,
    },
    Subscribe {
        msg_id: u16,
        filter: String,
        qos: QoS,
    },
    SubAck {
        msg_id: u16,
        granted: u8,
    },
    PingReq,
    PingResp,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_be_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u8(&mut self) -> Result<u8, CodecError> {
        let b = *self.buf.get(self.pos).ok_or(CodecError::Truncated)?;
        self.pos += 1;
        Ok(b)
    }

    fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_be_bytes([self.u8()?, self.u8()?]))
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(CodecError::Truncated)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn string(&mut self) -> Result<String, CodecError> {
        let n = self.u16()? as usize;
        String::from_utf8(self.bytes(n)?.to_vec()).or_else(|_| malformed("string is not UTF-8"))
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }

    fn done(&self) -> Result<(), CodecError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(CodecError::Trailing(n)),
        }
    }
}

impl Packet {
    pub fn encode(&self) -> Vec<u8> {
        let mut body = Vec::new();
        let first = match self {
            Packet::Connect {
                client_id,
                keep_alive,
                clean_session,
            } => {
                put_str(&mut body, "MQTT");
                body.push(4);
                body.push(if *clean_session { 0x02 } else { 0 });
                body.extend_from_slice(&keep_alive.to_be_bytes());
                put_str(&mut body, client_id);
                CONNECT << 4
            }
            Packet::ConnAck {
                session_present,
                code,
            } => {
                body.push(*session_present as u8);
                body.push(*code);
                CONNACK << 4
            }
            Packet::Publish(p) => {
                put_str(&mut body, &p.topic);
                if p.qos == QoS::AtLeastOnce {
                    body.extend_from_slice(&p.msg_id.to_be_bytes());
                }
                body.extend_from_slice(&p.payload);
                (PUBLISH << 4) | ((p.dup as u8) << 3) | (p.qos.bits() << 1) | p.retain as u8
            }
            Packet::PubAck { msg_id } => {
                body.extend_from_slice(&msg_id.to_be_bytes());
                PUBACK << 4
            }
            Packet::Subscribe {
                msg_id,
                filter,
                qos,
            } => {
                body.extend_from_slice(&msg_id.to_be_bytes());
                put_str(&mut body, filter);
                body.push(qos.bits());
                (SUBSCRIBE << 4) | 0x02
            }
            Packet::SubAck { msg_id, granted } => {
                body.extend_from_slice(&msg_id.to_be_bytes());
                body.push(*granted);
                SUBACK << 4
            }
            Packet::PingReq => PINGREQ << 4,
            Packet::PingResp => PINGRESP << 4,
        };
        let mut out = Vec::with_capacity(body.len() + 2);
        out.push(first);
        let mut len = body.len();
        loop {
            let mut byte = (len % 128) as u8;
            len /= 128;
            if len > 0 {
                byte |= 0x80;
            }
            out.push(byte);
            if len == 0 {
                break;
            }
        }
        out.extend_from_slice(&body);
        out
    }

    /// Decodes exactly one packet occupying the whole buffer.
    pub fn decode(buf: &[u8]) -> Result<Packet, CodecError> {
        match Self::decode_frame(buf)? {
            Some((p, used)) if used == buf.len() => Ok(p),
            Some((_, used)) => Err(CodecError::Trailing(buf.len() - used)),
            None => Err(CodecError::Truncated),
        }
    }

    /// Decodes the first packet of a stream buffer; `None` if it is incomplete.
    pub fn decode_frame(buf: &[u8]) -> Result<Option<(Packet, usize)>, CodecError> {
        let Some(&first) = buf.first() else {
            return Ok(None);
        };
        let mut len = 0usize;
        let mut idx = 1;
        let mut shift = 0;
        loop {
            let Some(&b) = buf.get(idx) else {
                return Ok(None);
            };
            len |= ((b & 0x7F) as usize) << shift;
            idx += 1;
            if b & 0x80 == 0 {
                break;
            }
            shift += 7;
            if shift > 21 {
                return malformed("remaining length exceeds four bytes");
            }
        }
        if buf.len() < idx + len {
            return Ok(None);
        }
        let body = &buf[idx..idx + len];
        Ok(Some((Self::decode_body(first, body)?, idx + len)))
    }

    fn decode_body(first: u8, body: &[u8]) -> Result<Packet, CodecError> {
        let kind = first >> 4;
        let flags = first & 0x0F;
        let mut r = Reader { buf: body, pos: 0 };
        if kind != PUBLISH && kind != SUBSCRIBE && flags != 0 {
            return malformed(format!("reserved flags {flags:#x} on packet type {kind}"));
        }
        let packet = match kind {
            CONNECT => {
                if r.string()? != "MQTT" || r.u8()? != 4 {
                    return Err(CodecError::Unsupported(
                        "protocol other than MQTT 3.1.1".into(),
                    ));
                }
                let cf = r.u8()?;
                if cf & !0x02 != 0 {
                    return Err(CodecError::Unsupported(format!("connect flags {cf:#x}")));
                }
                let keep_alive = r.u16()?;
                Packet::Connect {
                    client_id: r.string()?,
                    keep_alive,
                    clean_session: cf & 0x02 != 0,
                }
            }
            CONNACK => {
                let ack = r.u8()?;
                if ack > 1 {
                    return malformed("connack flags");
                }
                Packet::ConnAck {
                    session_present: ack == 1,
                    code: r.u8()?,
                }
            }
            PUBLISH => {
                let qos = QoS::try_from((flags >> 1) & 0x03).map_err(CodecError::Unsupported)?;
                let dup = flags & 0x08 != 0;
                if dup && qos == QoS::AtMostOnce {
                    return malformed("DUP set on a QoS 0 publish");
                }
                let topic = r.string()?;
                let msg_id = match qos {
                    QoS::AtLeastOnce => match r.u16()? {
                        0 => return malformed("zero message id"),
                        id => id,
                    },
                    QoS::AtMostOnce => 0,
                };
                Packet::Publish(Publish {
                    dup,
                    qos,
                    retain: flags & 1 != 0,
                    topic,
                    msg_id,
                    payload: r.rest().to_vec(),
                })
            }
            PUBACK => Packet::PubAck { msg_id: r.u16()? },
            SUBSCRIBE => {
                if flags != 0x02 {
                    return malformed("subscribe flags must be 0x2");
                }
                let msg_id = r.u16()?;
                let filter = r.string()?;
                let qos = QoS::try_from(r.u8()?).map_err(CodecError::Unsupported)?;
                Packet::Subscribe {
                    msg_id,
                    filter,
                    qos,
                }
            }
            SUBACK => Packet::SubAck {
                msg_id: r.u16()?,
                granted: r.u8()?,
            },
            PINGREQ => Packet::PingReq,
            PINGRESP => Packet::PingResp,
            other => return Err(CodecError::Unsupported(format!("packet type {other}"))),
        };
        r.done()?;
        Ok(packet)
    }
}

/// MQTT topic filter match with `+` and `#` wildcards.
pub fn topic_matches(filter: &str, topic: &str) -> bool {
    let mut f = filter.split('/');
    let mut t = topic.split('/');
    loop {
        match (f.next(), t.next()) {
            (Some("#"), _) => return true,
            (Some("+"), Some(_)) => {}
            (Some(a), Some(b)) if a == b => {}
            (None, None) => return true,
            _ => return false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientConfig {
    pub client_id: String,
    pub topic: String,
    pub qos: QoS,
    pub keep_alive_s: u16,
    pub ack_timeout: TickTime,
    pub max_tries: u32,
    pub connack_timeout: TickTime,
    pub subscribe: Option<String>,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            client_id: "z1-client".into(),
            topic: "temperature".into(),
            qos: QoS::AtLeastOnce,
            keep_alive_s: 30,
            ack_timeout: TickTime::from_secs(5),
            max_tries: 3,
            connack_timeout: TickTime::from_secs(5),
            subscribe: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClientTimer {
    Connack,
    Retransmit(u16),
    KeepAlive,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientInput {
    AppPublish(Vec<u8>),
    TransportUp,
    TransportDown { failed: bool },
    Inbound(Packet),
    Timer(ClientTimer),
}

pub type ClientOutput = Output<Packet, ClientTimer>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientPhase {
    Disconnected,
    Connecting,
    AwaitConnack,
    Up,
}

#[derive(Debug, Clone)]
struct InFlight {
    publish: Publish,
    tries: u32,
}

#[derive(Debug, Clone)]
pub struct Client {
    cfg: ClientConfig,
    phase: ClientPhase,
    ids: MsgIdCounter,
    queued: VecDeque<Vec<u8>>,
    in_flight: BTreeMap<u16, InFlight>,
    active_since_ping: bool,
}

impl Client {
    pub fn new(cfg: ClientConfig) -> Self {
        Client {
            cfg,
            phase: ClientPhase::Disconnected,
            ids: MsgIdCounter::default(),
            queued: VecDeque::new(),
            in_flight: BTreeMap::new(),
            active_since_ping: false,
        }
    }

    pub fn with_msg_ids(mut self, ids: MsgIdCounter) -> Self {
        self.ids = ids;
        self
    }

    pub fn phase(&self) -> ClientPhase {
        self.phase
    }

    pub fn in_flight_len(&self) -> usize {
        self.in_flight.len()
    }

    pub fn step(&mut self, input: ClientInput) -> Vec<ClientOutput> {
        let mut out = Vec::new();
        match input {
            ClientInput::AppPublish(payload) => {
                if self.phase == ClientPhase::Up {
                    self.publish(payload, &mut out);
                } else {
                    self.queued.push_back(payload);
                    if self.phase == ClientPhase::Disconnected {
                        self.phase = ClientPhase::Connecting;
                        out.push(Output::Open);
                    }
                }
            }
            ClientInput::TransportUp => {
                self.phase = ClientPhase::AwaitConnack;
                out.push(Output::Send(Packet::Connect {
                    client_id: self.cfg.client_id.clone(),
                    keep_alive: self.cfg.keep_alive_s,
                    clean_session: true,
                }));
                out.push(Output::SetTimer(
                    ClientTimer::Connack,
                    self.cfg.connack_timeout,
                ));
            }
            ClientInput::TransportDown { failed } => {
                if self.phase == ClientPhase::AwaitConnack {
                    out.push(Output::CancelTimer(ClientTimer::Connack));
                }
                self.phase = ClientPhase::Disconnected;
                if failed {
                    out.push(Output::Notify(Notice::ConnectionFailed));
                }
            }
            ClientInput::Inbound(packet) => self.on_packet(packet, &mut out),
            ClientInput::Timer(t) => self.on_timer(t, &mut out),
        }
        out
    }

    fn send(&mut self, packet: Packet, out: &mut Vec<ClientOutput>) {
        if packet != Packet::PingReq {
            self.active_since_ping = true;
        }
        out.push(Output::Send(packet));
    }

    fn publish(&mut self, payload: Vec<u8>, out: &mut Vec<ClientOutput>) {
        let msg_id = match self.cfg.qos {
            QoS::AtMostOnce => 0,
            QoS::AtLeastOnce => self.ids.next_id(),
        };
        let publish = Publish {
            dup: false,
            qos: self.cfg.qos,
            retain: false,
            topic: self.cfg.topic.clone(),
            msg_id,
            payload,
        };
        if self.cfg.qos == QoS::AtLeastOnce {
            self.in_flight.insert(
                msg_id,
                InFlight {
                    publish: publish.clone(),
                    tries: 1,
                },
            );
            out.push(Output::SetTimer(
                ClientTimer::Retransmit(msg_id),
                self.cfg.ack_timeout,
            ));
        }
        self.send(Packet::Publish(publish), out);
    }

    fn on_packet(&mut self, packet: Packet, out: &mut Vec<ClientOutput>) {
        match packet {
            Packet::ConnAck { code, .. } if self.phase == ClientPhase::AwaitConnack => {
                out.push(Output::CancelTimer(ClientTimer::Connack));
                if code != 0 {
                    self.phase = ClientPhase::Disconnected;
                    out.push(Output::Notify(Notice::ConnectionFailed));
                    out.push(Output::Close);
                    return;
                }
                self.phase = ClientPhase::Up;
                out.push(Output::Notify(Notice::SessionUp));
                out.push(Output::SetTimer(
                    ClientTimer::KeepAlive,
                    TickTime::from_secs(self.cfg.keep_alive_s as u64),
                ));
                if let Some(filter) = self.cfg.subscribe.clone() {
                    let msg_id = self.ids.next_id();
                    self.send(
                        Packet::Subscribe {
                            msg_id,
                            filter,
                            qos: self.cfg.qos,
                        },
                        out,
                    );
                }
                let resend: Vec<Publish> =
                    self.in_flight.values().map(|f| f.publish.clone()).collect();
                for mut p in resend {
                    p.dup = true;
                    self.send(Packet::Publish(p), out);
                }
                while let Some(payload) = self.queued.pop_front() {
                    self.publish(payload, out);
                }
            }
            Packet::PubAck { msg_id } => {
                if self.in_flight.remove(&msg_id).is_some() {
                    out.push(Output::CancelTimer(ClientTimer::Retransmit(msg_id)));
                    out.push(Output::Notify(Notice::Delivered { msg_id }));
                }
            }
            Packet::Publish(p) => {
                if p.qos == QoS::AtLeastOnce {
                    self.send(Packet::PubAck { msg_id: p.msg_id }, out);
                }
                out.push(Output::Notify(Notice::Received {
                    topic: p.topic,
                    payload: p.payload,
                }));
            }
            Packet::SubAck { .. } | Packet::PingResp => {}
            other => out.push(Output::Notify(Notice::Dropped(format!(
                "unexpected {other:?}"
            )))),
        }
    }

    fn on_timer(&mut self, timer: ClientTimer, out: &mut Vec<ClientOutput>) {
        match timer {
            ClientTimer::Connack => {
                if self.phase == ClientPhase::AwaitConnack {
                    self.phase = ClientPhase::Disconnected;
                    out.push(Output::Notify(Notice::ConnectionFailed));
                    out.push(Output::Close);
                }
            }
            ClientTimer::Retransmit(msg_id) => {
                let up = self.phase == ClientPhase::Up;
                let max_tries = self.cfg.max_tries;
                let Some(f) = self.in_flight.get_mut(&msg_id) else {
                    return;
                };
                if !up {
                    // resent with DUP once the session is back
                    out.push(Output::SetTimer(timer, self.cfg.ack_timeout));
                } else if f.tries < max_tries {
                    f.tries += 1;
                    f.publish.dup = true;
                    let p = f.publish.clone();
                    out.push(Output::SetTimer(timer, self.cfg.ack_timeout));
                    self.send(Packet::Publish(p), out);
                } else {
                    self.in_flight.remove(&msg_id);
                    out.push(Output::Notify(Notice::PublishFailed { msg_id }));
                }
            }
            ClientTimer::KeepAlive => {
                if self.phase != ClientPhase::Up {
                    return;
                }
                if !self.active_since_ping {
                    self.send(Packet::PingReq, out);
                }
                self.active_since_ping = false;
                out.push(Output::SetTimer(
                    timer,
                    TickTime::from_secs(self.cfg.keep_alive_s as u64),
                ));
            }
        }
    }
}

/// Retransmission timer for a broker-originated QoS 1 delivery.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BrokerTimer<S> {
    pub to: S,
    pub msg_id: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BrokerOutput<S> {
    Send(S, Packet),
    SetTimer(BrokerTimer<S>, TickTime),
    CancelTimer(BrokerTimer<S>),
    Diagnostic(String),
}

const DEDUP_WINDOW: usize = 64;

#[derive(Debug, Clone)]
struct Session {
    client_id: String,
    subscriptions: Vec<(String, QoS)>,
    seen: VecDeque<u16>,
    outbound: BTreeMap<u16, (Publish, u32)>,
}

/// A lightweight broker keyed by an opaque session handle.
#[derive(Debug, Clone)]
pub struct Broker<S: Ord> {
    sessions: BTreeMap<S, Session>,
    ids: MsgIdCounter,
    ack_timeout: TickTime,
    max_tries: u32,
    /// Count of distinct QoS 1 publishes accepted per (client id, message id).
    accepted: HashMap<(String, u16), u32>,
}

impl<S: Clone + Ord + Hash + std::fmt::Debug> Broker<S> {
    pub fn new(ack_timeout: TickTime, max_tries: u32) -> Self {
        Broker {
            sessions: BTreeMap::new(),
            ids: MsgIdCounter::default(),
            ack_timeout,
            max_tries,
            accepted: HashMap::new(),
        }
    }

    pub fn has_session(&self, s: &S) -> bool {
        self.sessions.contains_key(s)
    }

    pub fn subscriber_count(&self, topic: &str) -> usize {
        self.sessions
            .values()
            .filter(|s| s.subscriptions.iter().any(|(f, _)| topic_matches(f, topic)))
            .count()
    }

    /// How many times a QoS 1 publish was accepted (fanned out) by the broker.
    pub fn accepted_count(&self, client_id: &str, msg_id: u16) -> u32 {
        self.accepted
            .get(&(client_id.to_owned(), msg_id))
            .copied()
            .unwrap_or(0)
    }

    pub fn disconnect(&mut self, s: &S) -> Vec<BrokerOutput<S>> {
        let Some(session) = self.sessions.remove(s) else {
            return Vec::new();
        };
        session
            .outbound
            .keys()
            .map(|&msg_id| {
                BrokerOutput::CancelTimer(BrokerTimer {
                    to: s.clone(),
                    msg_id,
                })
            })
            .collect()
    }

    pub fn handle(&mut self, from: S, packet: Packet) -> Vec<BrokerOutput<S>> {
        let mut out = Vec::new();
        if let Packet::Connect { client_id, .. } = packet {
            out.extend(self.disconnect(&from));
            self.sessions.insert(
                from.clone(),
                Session {
                    client_id,
                    subscriptions: Vec::new(),
                    seen: VecDeque::new(),
                    outbound: BTreeMap::new(),
                },
            );
            out.push(BrokerOutput::Send(
                from,
                Packet::ConnAck {
                    session_present: false,
                    code: 0,
                },
            ));
            return out;
        }
        let Some(session) = self.sessions.get_mut(&from) else {
            out.push(BrokerOutput::Diagnostic(format!(
                "dropping {packet:?} from unknown session {from:?}"
            )));
            return out;
        };
        match packet {
            Packet::Subscribe {
                msg_id,
                filter,
                qos,
            } => {
                session.subscriptions.retain(|(f, _)| f != &filter);
                session.subscriptions.push((filter, qos));
                out.push(BrokerOutput::Send(
                    from,
                    Packet::SubAck {
                        msg_id,
                        granted: qos.bits(),
                    },
                ));
            }
            Packet::PingReq => out.push(BrokerOutput::Send(from, Packet::PingResp)),
            Packet::PubAck { msg_id } => {
                if session.outbound.remove(&msg_id).is_some() {
                    out.push(BrokerOutput::CancelTimer(BrokerTimer { to: from, msg_id }));
                }
            }
            Packet::Publish(p) => {
                let fresh = match p.qos {
                    QoS::AtMostOnce => true,
                    QoS::AtLeastOnce => {
                        let fresh = !session.seen.contains(&p.msg_id);
                        if fresh {
                            session.seen.push_back(p.msg_id);
                            if session.seen.len() > DEDUP_WINDOW {
                                session.seen.pop_front();
                            }
                            *self
                                .accepted
                                .entry((session.client_id.clone(), p.msg_id))
                                .or_default() += 1;
                        }
                        fresh
                    }
                };
                if p.qos == QoS::AtLeastOnce {
                    out.push(BrokerOutput::Send(
                        from.clone(),
                        Packet::PubAck { msg_id: p.msg_id },
                    ));
                }
                if fresh {
                    self.fan_out(&p, &mut out);
                }
            }
            other => out.push(BrokerOutput::Diagnostic(format!(
                "unexpected {other:?} from {from:?}"
            ))),
        }
        out
    }

    fn fan_out(&mut self, p: &Publish, out: &mut Vec<BrokerOutput<S>>) {
        for (key, session) in self.sessions.iter_mut() {
            let Some(granted) = session
                .subscriptions
                .iter()
                .filter(|(f, _)| topic_matches(f, &p.topic))
                .map(|(_, q)| *q)
                .max()
            else {
                continue;
            };
            let qos = granted.min(p.qos);
            let msg_id = if qos == QoS::AtLeastOnce {
                self.ids.next_id()
            } else {
                0
            };
            let fwd = Publish {
                dup: false,
                qos,
                retain: false,
                topic: p.topic.clone(),
                msg_id,
                payload: p.payload.clone(),
            };
            if qos == QoS::AtLeastOnce {
                session.outbound.insert(msg_id, (fwd.clone(), 1));
                out.push(BrokerOutput::SetTimer(
                    BrokerTimer {
                        to: key.clone(),
                        msg_id,
                    },
                    self.ack_timeout,
                ));
            }
            out.push(BrokerOutput::Send(key.clone(), Packet::Publish(fwd)));
        }
    }

    pub fn timeout(&mut self, timer: BrokerTimer<S>) -> Vec<BrokerOutput<S>> {
        let mut out = Vec::new();
        let Some(session) = self.sessions.get_mut(&timer.to) else {
            return out;
        };
        let Some((publish, tries)) = session.outbound.get_mut(&timer.msg_id) else {
            return out;
        };
        if *tries < self.max_tries {
            *tries += 1;
            publish.dup = true;
            out.push(BrokerOutput::Send(
                timer.to.clone(),
                Packet::Publish(publish.clone()),
            ));
            out.push(BrokerOutput::SetTimer(timer, self.ack_timeout));
        } else {
            session.outbound.remove(&timer.msg_id);
            out.push(BrokerOutput::Diagnostic(format!(
                "delivery {} to {:?} abandoned",
                timer.msg_id, timer.to
            )));
        }
        out
    }
}
