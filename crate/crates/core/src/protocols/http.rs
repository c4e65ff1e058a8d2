//! Minimal HTTP/1.1 over the stream transport: one connection per request,
//! no keep-alive, no chunked encoding.

use std::collections::{HashMap, VecDeque};

use super::{malformed, CodecError, Notice, Output};
use crate::engine::TickTime;

const VERSION: &str = "HTTP/1.1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub method: String,
    pub path: String,
    /// Header order is preserved; Content-Length is derived from `body`.
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub status: u16,
    pub reason: String,
    /// Extra headers; Content-Length is always written from `body`.
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HttpMessage {
    Request(Request),
    Response(Response),
}

impl Request {
    pub fn get(path: &str, host: &str) -> Request {
        Request {
            method: "GET".into(),
            path: path.into(),
            headers: vec![("Host".into(), host.into())],
            body: Vec::new(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut head = format!("{} {} {VERSION}\r\n", self.method, self.path);
        for (k, v) in &self.headers {
            head.push_str(&format!("{k}: {v}\r\n"));
        }
        if !self.body.is_empty() {
            head.push_str(&format!("Content-Length: {}\r\n", self.body.len()));
        }
        head.push_str("\r\n");
        let mut out = head.into_bytes();
        out.extend_from_slice(&self.body);
        out
    }

    pub fn decode_frame(buf: &[u8]) -> Result<Option<(Request, usize)>, CodecError> {
        let Some((start, headers, body_at)) = split_head(buf)? else {
            return Ok(None);
        };
        let mut parts = start.splitn(3, ' ');
        let (Some(method), Some(path), Some(version)) = (parts.next(), parts.next(), parts.next())
        else {
            return malformed(format!("request line {start:?}"));
        };
        if version != VERSION {
            return Err(CodecError::Unsupported(format!("version {version}")));
        }
        if method.is_empty() || path.is_empty() || !method.bytes().all(|b| b.is_ascii_uppercase()) {
            return malformed(format!("request line {start:?}"));
        }
        let (headers, len) = take_length(headers)?;
        let len = len.unwrap_or(0);
        if buf.len() < body_at + len {
            return Ok(None);
        }
        let req = Request {
            method: method.into(),
            path: path.into(),
            headers,
            body: buf[body_at..body_at + len].to_vec(),
        };
        Ok(Some((req, body_at + len)))
    }
}

impl Response {
    pub fn new(status: u16, body: Vec<u8>) -> Response {
        let reason = match status {
            200 => "OK",
            404 => "Not Found",
            405 => "Method Not Allowed",
            _ => "Unknown",
        };
        Response {
            status,
            reason: reason.into(),
            headers: Vec::new(),
            body,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut head = format!("{VERSION} {} {}\r\n", self.status, self.reason);
        for (k, v) in &self.headers {
            head.push_str(&format!("{k}: {v}\r\n"));
        }
        head.push_str(&format!("Content-Length: {}\r\n\r\n", self.body.len()));
        let mut out = head.into_bytes();
        out.extend_from_slice(&self.body);
        out
    }

    pub fn decode_frame(buf: &[u8]) -> Result<Option<(Response, usize)>, CodecError> {
        let Some((start, headers, body_at)) = split_head(buf)? else {
            return Ok(None);
        };
        let mut parts = start.splitn(3, ' ');
        let (Some(version), Some(code), Some(reason)) = (parts.next(), parts.next(), parts.next())
        else {
            return malformed(format!("status line {start:?}"));
        };
        if version != VERSION {
            return malformed(format!("status line {start:?}"));
        }
        let status = match code.parse::<u16>() {
            Ok(s) if code.len() == 3 && (100..600).contains(&s) => s,
            _ => return malformed(format!("status code {code:?}")),
        };
        let (headers, len) = take_length(headers)?;
        let Some(len) = len else {
            return malformed("response without Content-Length");
        };
        if buf.len() < body_at + len {
            return Ok(None);
        }
        let resp = Response {
            status,
            reason: reason.into(),
            headers,
            body: buf[body_at..body_at + len].to_vec(),
        };
        Ok(Some((resp, body_at + len)))
    }
}

/// Splits off the start line and header lines once the blank line is in.
#[allow(clippy::type_complexity)]
fn split_head(buf: &[u8]) -> Result<Option<(String, Vec<(String, String)>, usize)>, CodecError> {
    let Some(end) = buf.windows(4).position(|w| w == b"\r\n\r\n") else {
        return Ok(None);
    };
    let head = std::str::from_utf8(&buf[..end]).or_else(|_| malformed("header is not UTF-8"))?;
    let mut lines = head.split("\r\n");
    let start = lines.next().unwrap_or_default().to_owned();
    let mut headers = Vec::new();
    for line in lines {
        let Some((k, v)) = line.split_once(':') else {
            return malformed(format!("header line {line:?}"));
        };
        if k.is_empty() || k.contains(' ') {
            return malformed(format!("header name {k:?}"));
        }
        headers.push((k.to_owned(), v.trim_start().to_owned()));
    }
    Ok(Some((start, headers, end + 4)))
}

#[allow(clippy::type_complexity)]
fn take_length(
    headers: Vec<(String, String)>,
) -> Result<(Vec<(String, String)>, Option<usize>), CodecError> {
    let mut len = None;
    let mut rest = Vec::with_capacity(headers.len());
    for (k, v) in headers {
        if k.eq_ignore_ascii_case("content-length") {
            match v.parse::<usize>() {
                Ok(n) if len.is_none() => len = Some(n),
                _ => return malformed(format!("Content-Length {v:?}")),
            }
        } else {
            rest.push((k, v));
        }
    }
    Ok((rest, len))
}

impl HttpMessage {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            HttpMessage::Request(r) => r.encode(),
            HttpMessage::Response(r) => r.encode(),
        }
    }

    /// Decodes exactly one message occupying the whole buffer.
    pub fn decode(buf: &[u8]) -> Result<HttpMessage, CodecError> {
        let (msg, used) = if buf.starts_with(VERSION.as_bytes()) {
            let r = Response::decode_frame(buf)?.ok_or(CodecError::Truncated)?;
            (HttpMessage::Response(r.0), r.1)
        } else {
            let r = Request::decode_frame(buf)?.ok_or(CodecError::Truncated)?;
            (HttpMessage::Request(r.0), r.1)
        };
        if used != buf.len() {
            return Err(CodecError::Trailing(buf.len() - used));
        }
        Ok(msg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientConfig {
    pub host: String,
    pub path: String,
    pub response_timeout: TickTime,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            host: "[fd00::1]".into(),
            path: "/temperature".into(),
            response_timeout: TickTime::from_secs(10),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ResponseTimer;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientInput {
    Request,
    TransportUp,
    TransportDown { failed: bool },
    Data(Vec<u8>),
    Timer(ResponseTimer),
}

pub type ClientOutput = Output<HttpMessage, ResponseTimer>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientPhase {
    Idle,
    Connecting,
    AwaitResponse,
    Closing,
}

#[derive(Debug, Clone)]
pub struct Client {
    cfg: ClientConfig,
    phase: ClientPhase,
    backlog: usize,
    inbox: Vec<u8>,
}

impl Client {
    pub fn new(cfg: ClientConfig) -> Self {
        Client {
            cfg,
            phase: ClientPhase::Idle,
            backlog: 0,
            inbox: Vec::new(),
        }
    }

    pub fn phase(&self) -> ClientPhase {
        self.phase
    }

    pub fn step(&mut self, input: ClientInput) -> Vec<ClientOutput> {
        let mut out = Vec::new();
        match input {
            ClientInput::Request => {
                if self.phase == ClientPhase::Idle {
                    self.open(&mut out);
                } else {
                    self.backlog += 1;
                }
            }
            ClientInput::TransportUp if self.phase == ClientPhase::Connecting => {
                self.phase = ClientPhase::AwaitResponse;
                self.inbox.clear();
                out.push(Output::Send(HttpMessage::Request(Request::get(
                    &self.cfg.path,
                    &self.cfg.host,
                ))));
                out.push(Output::SetTimer(ResponseTimer, self.cfg.response_timeout));
            }
            ClientInput::TransportUp => {}
            ClientInput::TransportDown { failed } => {
                match self.phase {
                    ClientPhase::Connecting => out.push(Output::Notify(Notice::RequestFailed(
                        "connect failed".into(),
                    ))),
                    ClientPhase::AwaitResponse => {
                        out.push(Output::CancelTimer(ResponseTimer));
                        let why = if failed {
                            "connection lost"
                        } else {
                            "closed before response"
                        };
                        out.push(Output::Notify(Notice::RequestFailed(why.into())));
                    }
                    ClientPhase::Idle | ClientPhase::Closing => {}
                }
                self.phase = ClientPhase::Idle;
                if self.backlog > 0 {
                    self.backlog -= 1;
                    self.open(&mut out);
                }
            }
            ClientInput::Data(bytes) => {
                if self.phase != ClientPhase::AwaitResponse {
                    return out;
                }
                self.inbox.extend_from_slice(&bytes);
                match Response::decode_frame(&self.inbox) {
                    Ok(None) => {}
                    Ok(Some((resp, _))) => {
                        out.push(Output::CancelTimer(ResponseTimer));
                        out.push(Output::Notify(Notice::Response {
                            status: resp.status,
                            payload: resp.body,
                        }));
                        self.finish(&mut out);
                    }
                    Err(e) => {
                        out.push(Output::CancelTimer(ResponseTimer));
                        out.push(Output::Notify(Notice::RequestFailed(format!(
                            "parse error: {e}"
                        ))));
                        self.finish(&mut out);
                    }
                }
            }
            ClientInput::Timer(ResponseTimer) => {
                if self.phase == ClientPhase::AwaitResponse {
                    out.push(Output::Notify(Notice::RequestFailed(
                        "response timeout".into(),
                    )));
                    self.finish(&mut out);
                }
            }
        }
        out
    }

    fn open(&mut self, out: &mut Vec<ClientOutput>) {
        self.phase = ClientPhase::Connecting;
        out.push(Output::Open);
    }

    fn finish(&mut self, out: &mut Vec<ClientOutput>) {
        self.phase = ClientPhase::Closing;
        self.inbox.clear();
        out.push(Output::Close);
    }
}

/// Origin server serving static resources.
#[derive(Debug, Clone, Default)]
pub struct Server {
    resources: HashMap<String, Vec<u8>>,
    served: VecDeque<String>,
}

impl Server {
    pub fn new() -> Self {
        Server::default()
    }

    pub fn add_resource(&mut self, path: &str, body: Vec<u8>) {
        self.resources.insert(path.to_owned(), body);
    }

    pub fn handle(&mut self, req: &Request) -> Response {
        self.served.push_back(req.path.clone());
        match (req.method.as_str(), self.resources.get(&req.path)) {
            ("GET", Some(body)) => Response::new(200, body.clone()),
            ("GET", None) => Response::new(404, Vec::new()),
            _ => Response::new(405, Vec::new()),
        }
    }

    pub fn served(&self) -> usize {
        self.served.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocols::sent;
    use proptest::prelude::*;

    #[test]
    fn request_text_size() {
        let bytes = Request::get("/s", "h").encode();
        assert_eq!(bytes, b"GET /s HTTP/1.1\r\nHost: h\r\n\r\n");
        assert_eq!(bytes.len(), 28);
    }

    #[test]
    fn response_roundtrip_and_framing() {
        let r = Response::new(200, b"21.5".to_vec());
        let mut bytes = r.encode();
        assert_eq!(bytes, b"HTTP/1.1 200 OK\r\nContent-Length: 4\r\n\r\n21.5");
        assert_eq!(Response::decode_frame(&bytes[..bytes.len() - 1]), Ok(None));
        bytes.extend_from_slice(b"extra");
        let (back, used) = Response::decode_frame(&bytes).unwrap().unwrap();
        assert_eq!((back, used), (r, bytes.len() - 5));
    }

    #[test]
    fn malformed_status_line_surfaces() {
        let mut c = Client::new(ClientConfig::default());
        c.step(ClientInput::Request);
        c.step(ClientInput::TransportUp);
        let out = c.step(ClientInput::Data(
            b"HTTP/1.1 2x0 OK\r\nContent-Length: 0\r\n\r\n".to_vec(),
        ));
        assert!(out.iter().any(|o| matches!(o, Output::Notify(Notice::RequestFailed(m)) if m.starts_with("parse error"))));
        assert!(out.contains(&Output::Close));
    }

    #[test]
    fn request_cycle() {
        let mut c = Client::new(ClientConfig::default());
        let mut s = Server::new();
        s.add_resource("/temperature", b"21.5".to_vec());
        assert_eq!(c.step(ClientInput::Request), vec![Output::Open]);
        let out = c.step(ClientInput::TransportUp);
        let HttpMessage::Request(req) = sent(&out)[0] else {
            panic!()
        };
        let resp = s.handle(req).encode();
        let (a, b) = resp.split_at(10);
        assert!(sent(&c.step(ClientInput::Data(a.to_vec()))).is_empty());
        let out = c.step(ClientInput::Data(b.to_vec()));
        assert!(out.contains(&Output::Notify(Notice::Response {
            status: 200,
            payload: b"21.5".to_vec()
        })));
        assert_eq!(out.last(), Some(&Output::Close));
        assert!(
            c.step(ClientInput::Request).is_empty(),
            "waits for the close"
        );
        assert_eq!(
            c.step(ClientInput::TransportDown { failed: false }),
            vec![Output::Open]
        );
    }

    #[test]
    fn connect_failure_and_timeout() {
        let mut c = Client::new(ClientConfig::default());
        c.step(ClientInput::Request);
        let out = c.step(ClientInput::TransportDown { failed: true });
        assert!(out[0] == Output::Notify(Notice::RequestFailed("connect failed".into())));
        c.step(ClientInput::Request);
        c.step(ClientInput::TransportUp);
        let out = c.step(ClientInput::Timer(ResponseTimer));
        assert!(out[0].clone() == Output::Notify(Notice::RequestFailed("response timeout".into())));
    }

    #[test]
    fn server_not_found() {
        let mut s = Server::new();
        assert_eq!(s.handle(&Request::get("/x", "h")).status, 404);
    }

    fn token() -> impl Strategy<Value = String> {
        proptest::string::string_regex("[A-Za-z0-9-]{1,12}").unwrap()
    }

    fn headers() -> impl Strategy<Value = Vec<(String, String)>> {
        prop::collection::vec(
            (
                token(),
                proptest::string::string_regex("[ -~]{0,20}").unwrap(),
            ),
            0..4,
        )
        .prop_map(|hs| {
            hs.into_iter()
                .filter(|(k, _)| !k.eq_ignore_ascii_case("content-length"))
                .map(|(k, v)| (k, v.trim().to_owned()))
                .collect::<Vec<_>>()
        })
    }

    pub(crate) fn arb_message() -> impl Strategy<Value = HttpMessage> {
        let body = prop::collection::vec(any::<u8>(), 0..100);
        prop_oneof![
            (
                proptest::string::string_regex("[A-Z]{3,7}").unwrap(),
                proptest::string::string_regex("/[a-z0-9/._-]{0,30}").unwrap(),
                headers(),
                body.clone()
            )
                .prop_map(|(method, path, headers, body)| HttpMessage::Request(
                    Request {
                        method,
                        path,
                        headers,
                        body
                    }
                )),
            (
                100u16..600,
                proptest::string::string_regex("[A-Za-z][A-Za-z ]{0,15}").unwrap(),
                headers(),
                body
            )
                .prop_map(|(status, reason, headers, body)| HttpMessage::Response(
                    Response {
                        status,
                        reason,
                        headers,
                        body
                    }
                )),
        ]
    }

    proptest! {
        #[test]
        fn codec_roundtrip(m in arb_message()) {
            prop_assert_eq!(HttpMessage::decode(&m.encode()), Ok(m));
        }
    }
}
