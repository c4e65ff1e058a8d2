//! CoAP subset: codec with a single Uri-Path option, a requesting client with
//! confirmable retransmission, and a resource server with duplicate detection.

use std::collections::{BTreeMap, HashMap, VecDeque};

use super::{malformed, CodecError, MsgIdCounter, Notice, Output};
use crate::engine::TickTime;

const VERSION: u8 = 1;
const OPT_URI_PATH: u8 = 11;
const PAYLOAD_MARKER: u8 = 0xFF;
pub const MAX_TOKEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MsgType {
    Con,
    Non,
    Ack,
    Rst,
}

impl MsgType {
    fn bits(self) -> u8 {
        match self {
            MsgType::Con => 0,
            MsgType::Non => 1,
            MsgType::Ack => 2,
            MsgType::Rst => 3,
        }
    }

    fn from_bits(b: u8) -> MsgType {
        match b & 3 {
            0 => MsgType::Con,
            1 => MsgType::Non,
            2 => MsgType::Ack,
            _ => MsgType::Rst,
        }
    }
}

/// Request or response code as `class.detail`, packed into one byte on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Code(pub u8);

impl Code {
    pub const EMPTY: Code = Code(0x00);
    pub const GET: Code = Code(0x01);
    pub const POST: Code = Code(0x02);
    pub const CONTENT: Code = Code(0x45);
    pub const NOT_FOUND: Code = Code(0x84);
    pub const METHOD_NOT_ALLOWED: Code = Code(0x85);

    pub fn class(self) -> u8 {
        self.0 >> 5
    }

    pub fn detail(self) -> u8 {
        self.0 & 0x1F
    }

    /// 2.05 becomes 205.
    pub fn as_status(self) -> u16 {
        self.class() as u16 * 100 + self.detail() as u16
    }

    pub fn is_request(self) -> bool {
        self.class() == 0 && self.0 != 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub mtype: MsgType,
    pub code: Code,
    pub msg_id: u16,
    pub token: Vec<u8>,
    /// Empty means no Uri-Path option.
    pub uri_path: String,
    pub payload: Vec<u8>,
}

impl Message {
    pub fn encode(&self) -> Vec<u8> {
        debug_assert!(self.token.len() <= MAX_TOKEN);
        let mut out =
            Vec::with_capacity(8 + self.token.len() + self.uri_path.len() + self.payload.len());
        out.push((VERSION << 6) | (self.mtype.bits() << 4) | self.token.len() as u8);
        out.push(self.code.0);
        out.extend_from_slice(&self.msg_id.to_be_bytes());
        out.extend_from_slice(&self.token);
        if !self.uri_path.is_empty() {
            let len = self.uri_path.len();
            match len {
                0..=12 => out.push((OPT_URI_PATH << 4) | len as u8),
                13..=268 => out.extend_from_slice(&[(OPT_URI_PATH << 4) | 13, (len - 13) as u8]),
                _ => {
                    out.push((OPT_URI_PATH << 4) | 14);
                    out.extend_from_slice(&((len - 269) as u16).to_be_bytes());
                }
            }
            out.extend_from_slice(self.uri_path.as_bytes());
        }
        if !self.payload.is_empty() {
            out.push(PAYLOAD_MARKER);
            out.extend_from_slice(&self.payload);
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Message, CodecError> {
        if buf.len() < 4 {
            return Err(CodecError::Truncated);
        }
        if buf[0] >> 6 != VERSION {
            return Err(CodecError::Unsupported(format!("version {}", buf[0] >> 6)));
        }
        let tkl = (buf[0] & 0x0F) as usize;
        if tkl > MAX_TOKEN {
            return malformed(format!("token length {tkl}"));
        }
        let mtype = MsgType::from_bits(buf[0] >> 4);
        let code = Code(buf[1]);
        let msg_id = u16::from_be_bytes([buf[2], buf[3]]);
        let mut pos = 4 + tkl;
        let token = buf.get(4..pos).ok_or(CodecError::Truncated)?.to_vec();
        let mut uri_path = String::new();
        let mut payload = Vec::new();
        while pos < buf.len() {
            let b = buf[pos];
            pos += 1;
            if b == PAYLOAD_MARKER {
                if pos == buf.len() {
                    return malformed("payload marker without payload");
                }
                payload = buf[pos..].to_vec();
                break;
            }
            if !uri_path.is_empty() {
                return Err(CodecError::Unsupported("more than one option".into()));
            }
            if b >> 4 != OPT_URI_PATH {
                return Err(CodecError::Unsupported(format!("option delta {}", b >> 4)));
            }
            let len = match b & 0x0F {
                13 => {
                    let e = *buf.get(pos).ok_or(CodecError::Truncated)? as usize;
                    pos += 1;
                    e + 13
                }
                14 => {
                    let e = buf.get(pos..pos + 2).ok_or(CodecError::Truncated)?;
                    pos += 2;
                    u16::from_be_bytes([e[0], e[1]]) as usize + 269
                }
                15 => return malformed("reserved option length"),
                n => n as usize,
            };
            if len == 0 {
                return Err(CodecError::Unsupported("empty Uri-Path segment".into()));
            }
            let raw = buf.get(pos..pos + len).ok_or(CodecError::Truncated)?;
            pos += len;
            uri_path =
                String::from_utf8(raw.to_vec()).or_else(|_| malformed("Uri-Path is not UTF-8"))?;
        }
        Ok(Message {
            mtype,
            code,
            msg_id,
            token,
            uri_path,
            payload,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientConfig {
    pub path: String,
    pub confirmable: bool,
    pub token_len: usize,
    pub ack_timeout: TickTime,
    pub max_retransmit: u32,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            path: "temperature".into(),
            confirmable: true,
            token_len: 2,
            ack_timeout: TickTime::from_secs(2),
            max_retransmit: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RetransmitTimer(pub u16);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientInput {
    Request,
    Inbound(Message),
    Timer(RetransmitTimer),
}

pub type ClientOutput = Output<Message, RetransmitTimer>;

#[derive(Debug, Clone)]
struct Exchange {
    request: Message,
    retransmits: u32,
    timeout: TickTime,
}

#[derive(Debug, Clone)]
pub struct Client {
    cfg: ClientConfig,
    ids: MsgIdCounter,
    open: BTreeMap<u16, Exchange>,
    /// Tokens of NON requests still awaiting a response.
    non_tokens: VecDeque<Vec<u8>>,
}

impl Client {
    pub fn new(cfg: ClientConfig) -> Self {
        assert!(cfg.token_len <= MAX_TOKEN, "token length above 8");
        Client {
            cfg,
            ids: MsgIdCounter::default(),
            open: BTreeMap::new(),
            non_tokens: VecDeque::new(),
        }
    }

    pub fn open_exchanges(&self) -> usize {
        self.open.len()
    }

    pub fn step(&mut self, input: ClientInput) -> Vec<ClientOutput> {
        let mut out = Vec::new();
        match input {
            ClientInput::Request => {
                let msg_id = self.ids.next_id();
                let token: Vec<u8> = msg_id
                    .to_be_bytes()
                    .iter()
                    .copied()
                    .cycle()
                    .take(self.cfg.token_len)
                    .collect();
                let request = Message {
                    mtype: if self.cfg.confirmable {
                        MsgType::Con
                    } else {
                        MsgType::Non
                    },
                    code: Code::GET,
                    msg_id,
                    token,
                    uri_path: self.cfg.path.clone(),
                    payload: Vec::new(),
                };
                if self.cfg.confirmable {
                    out.push(Output::SetTimer(
                        RetransmitTimer(msg_id),
                        self.cfg.ack_timeout,
                    ));
                    self.open.insert(
                        msg_id,
                        Exchange {
                            request: request.clone(),
                            retransmits: 0,
                            timeout: self.cfg.ack_timeout,
                        },
                    );
                } else {
                    self.non_tokens.push_back(request.token.clone());
                    if self.non_tokens.len() > 16 {
                        self.non_tokens.pop_front();
                    }
                }
                out.push(Output::Send(request));
            }
            ClientInput::Inbound(m) => self.on_message(m, &mut out),
            ClientInput::Timer(RetransmitTimer(msg_id)) => {
                let Some(ex) = self.open.get_mut(&msg_id) else {
                    return out;
                };
                if ex.retransmits < self.cfg.max_retransmit {
                    ex.retransmits += 1;
                    ex.timeout = TickTime(ex.timeout.0 * 2);
                    out.push(Output::Send(ex.request.clone()));
                    out.push(Output::SetTimer(RetransmitTimer(msg_id), ex.timeout));
                } else {
                    self.open.remove(&msg_id);
                    out.push(Output::Notify(Notice::ExchangeFailed { msg_id }));
                }
            }
        }
        out
    }

    fn on_message(&mut self, m: Message, out: &mut Vec<ClientOutput>) {
        match m.mtype {
            MsgType::Ack | MsgType::Rst => {
                let Some(ex) = self.open.remove(&m.msg_id) else {
                    out.push(Output::Notify(Notice::Dropped(format!(
                        "stray {:?} {}",
                        m.mtype, m.msg_id
                    ))));
                    return;
                };
                out.push(Output::CancelTimer(RetransmitTimer(m.msg_id)));
                if m.mtype == MsgType::Rst || m.token != ex.request.token {
                    out.push(Output::Notify(Notice::ExchangeFailed { msg_id: m.msg_id }));
                } else {
                    out.push(Output::Notify(Notice::Response {
                        status: m.code.as_status(),
                        payload: m.payload,
                    }));
                }
            }
            MsgType::Non | MsgType::Con => {
                if let Some(i) = self.non_tokens.iter().position(|t| *t == m.token) {
                    self.non_tokens.remove(i);
                    out.push(Output::Notify(Notice::Response {
                        status: m.code.as_status(),
                        payload: m.payload,
                    }));
                } else {
                    out.push(Output::Notify(Notice::Dropped(format!(
                        "unsolicited message {}",
                        m.msg_id
                    ))));
                }
                if m.mtype == MsgType::Con {
                    out.push(Output::Send(Message {
                        mtype: MsgType::Ack,
                        code: Code::EMPTY,
                        msg_id: m.msg_id,
                        token: Vec::new(),
                        uri_path: String::new(),
                        payload: Vec::new(),
                    }));
                }
            }
        }
    }
}

const DEDUP_CAPACITY: usize = 64;

/// Resource server answering GETs with piggybacked responses.
#[derive(Debug, Clone)]
pub struct Server<A> {
    resources: HashMap<String, Vec<u8>>,
    ids: MsgIdCounter,
    recent: HashMap<(u16, A), Message>,
    order: VecDeque<(u16, A)>,
    handled: u64,
    duplicates: u64,
}

impl<A: Clone + Eq + std::hash::Hash> Server<A> {
    pub fn new() -> Self {
        Server {
            resources: HashMap::new(),
            ids: MsgIdCounter::starting_after(0x8000),
            recent: HashMap::new(),
            order: VecDeque::new(),
            handled: 0,
            duplicates: 0,
        }
    }

    pub fn add_resource(&mut self, path: &str, body: Vec<u8>) {
        self.resources.insert(path.to_owned(), body);
    }

    /// Requests processed for the first time.
    pub fn handled(&self) -> u64 {
        self.handled
    }

    pub fn duplicates(&self) -> u64 {
        self.duplicates
    }

    /// Returns the reply to send back to `peer`, if any.
    pub fn handle(&mut self, peer: A, m: Message) -> Option<Message> {
        if !m.code.is_request() {
            return None;
        }
        let key = (m.msg_id, peer);
        if let Some(reply) = self.recent.get(&key) {
            self.duplicates += 1;
            return Some(reply.clone());
        }
        self.handled += 1;
        let (code, payload) = match (m.code, self.resources.get(&m.uri_path)) {
            (Code::GET, Some(body)) => (Code::CONTENT, body.clone()),
            (Code::GET, None) => (Code::NOT_FOUND, Vec::new()),
            _ => (Code::METHOD_NOT_ALLOWED, Vec::new()),
        };
        let reply = match m.mtype {
            MsgType::Con => Message {
                mtype: MsgType::Ack,
                code,
                msg_id: m.msg_id,
                token: m.token,
                uri_path: String::new(),
                payload,
            },
            _ => Message {
                mtype: MsgType::Non,
                code,
                msg_id: self.ids.next_id(),
                token: m.token,
                uri_path: String::new(),
                payload,
            },
        };
        self.recent.insert(key.clone(), reply.clone());
        self.order.push_back(key);
        if self.order.len() > DEDUP_CAPACITY {
            if let Some(old) = self.order.pop_front() {
                self.recent.remove(&old);
            }
        }
        Some(reply)
    }
}

impl<A: Clone + Eq + std::hash::Hash> Default for Server<A> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocols::sent;
    use proptest::prelude::*;

    fn get(path: &str, token: Vec<u8>) -> Message {
        Message {
            mtype: MsgType::Con,
            code: Code::GET,
            msg_id: 1,
            token,
            uri_path: path.into(),
            payload: vec![],
        }
    }

    #[test]
    fn get_size() {
        assert_eq!(
            get("s", vec![]).encode(),
            vec![0x40, 0x01, 0, 1, 0xB1, b's']
        );
    }

    #[test]
    fn extended_option_lengths() {
        for len in [12, 13, 200, 268, 269, 400] {
            let m = get(&"a".repeat(len), vec![9; 4]);
            let bytes = m.encode();
            let ext = match len {
                0..=12 => 0,
                13..=268 => 1,
                _ => 2,
            };
            assert_eq!(bytes.len(), 4 + 4 + 1 + ext + len);
            assert_eq!(Message::decode(&bytes), Ok(m));
        }
    }

    #[test]
    fn decode_errors() {
        assert_eq!(Message::decode(&[0x40, 1, 0]), Err(CodecError::Truncated));
        assert!(Message::decode(&[0x49, 1, 0, 0]).is_err(), "token length 9");
        assert!(
            Message::decode(&[0x40, 1, 0, 0, 0xFF]).is_err(),
            "marker without payload"
        );
        assert!(Message::decode(&[0x80, 1, 0, 0]).is_err(), "version 2");
        assert_eq!(
            Message::decode(&[0x40, 1, 0, 0, 0xB3, b'a']),
            Err(CodecError::Truncated)
        );
    }

    #[test]
    fn status_codes() {
        assert_eq!(Code::CONTENT.as_status(), 205);
        assert_eq!(Code::NOT_FOUND.as_status(), 404);
    }

    #[test]
    fn con_exchange_lossless() {
        let mut c = Client::new(ClientConfig::default());
        let mut s: Server<u8> = Server::new();
        s.add_resource("temperature", b"21.5".to_vec());
        let out = c.step(ClientInput::Request);
        let req = sent(&out)[0].clone();
        let reply = s.handle(1, req).unwrap();
        assert_eq!(reply.mtype, MsgType::Ack);
        let out = c.step(ClientInput::Inbound(reply));
        assert!(out.contains(&Output::Notify(Notice::Response {
            status: 205,
            payload: b"21.5".to_vec()
        })));
        assert!(out.contains(&Output::CancelTimer(RetransmitTimer(1))));
        assert_eq!(c.open_exchanges(), 0);
    }

    #[test]
    fn unknown_resource_is_not_found() {
        let mut s: Server<u8> = Server::new();
        assert_eq!(
            s.handle(1, get("nope", vec![])).unwrap().code,
            Code::NOT_FOUND
        );
    }

    #[test]
    fn backoff_doubles_and_exhausts() {
        let mut c = Client::new(ClientConfig::default());
        let out = c.step(ClientInput::Request);
        assert!(out.contains(&Output::SetTimer(
            RetransmitTimer(1),
            TickTime::from_secs(2)
        )));
        let mut waits = vec![];
        for _ in 0..4 {
            let out = c.step(ClientInput::Timer(RetransmitTimer(1)));
            assert_eq!(sent(&out).len(), 1);
            for o in &out {
                if let Output::SetTimer(_, d) = o {
                    waits.push(d.0 / crate::engine::RTIMER_HZ);
                }
            }
        }
        assert_eq!(waits, vec![4, 8, 16, 32]);
        let out = c.step(ClientInput::Timer(RetransmitTimer(1)));
        assert_eq!(
            out,
            vec![Output::Notify(Notice::ExchangeFailed { msg_id: 1 })]
        );
    }

    #[test]
    fn non_request_has_no_timer() {
        let mut c = Client::new(ClientConfig {
            confirmable: false,
            ..ClientConfig::default()
        });
        let out = c.step(ClientInput::Request);
        assert_eq!(out.len(), 1);
        assert_eq!(sent(&out)[0].mtype, MsgType::Non);
        let mut s: Server<u8> = Server::new();
        s.add_resource("temperature", b"x".to_vec());
        let reply = s.handle(3, sent(&out)[0].clone()).unwrap();
        let out = c.step(ClientInput::Inbound(reply));
        assert!(matches!(
            out[..],
            [Output::Notify(Notice::Response { status: 205, .. })]
        ));
    }

    #[test]
    fn server_dedups_by_id_and_peer() {
        let mut s: Server<u8> = Server::new();
        s.add_resource("s", b"x".to_vec());
        let a = s.handle(1, get("s", vec![1])).unwrap();
        let b = s.handle(1, get("s", vec![1])).unwrap();
        s.handle(2, get("s", vec![1])).unwrap();
        assert_eq!(a, b);
        assert_eq!((s.handled(), s.duplicates()), (2, 1));
    }

    pub(crate) fn arb_message() -> impl Strategy<Value = Message> {
        let mtype = prop_oneof![
            Just(MsgType::Con),
            Just(MsgType::Non),
            Just(MsgType::Ack),
            Just(MsgType::Rst)
        ];
        (
            mtype,
            any::<u8>(),
            any::<u16>(),
            prop::collection::vec(any::<u8>(), 0..=MAX_TOKEN),
            proptest::string::string_regex("[a-z0-9._-]{0,300}").unwrap(),
            prop::collection::vec(any::<u8>(), 0..100),
        )
            .prop_map(|(mtype, code, msg_id, token, uri_path, payload)| Message {
                mtype,
                code: Code(code),
                msg_id,
                token,
                uri_path,
                payload,
            })
    }

    proptest! {
        #[test]
        fn codec_roundtrip(m in arb_message()) {
            prop_assert_eq!(Message::decode(&m.encode()), Ok(m));
        }
    }
}
