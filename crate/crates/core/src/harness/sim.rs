//! End-to-end scenario runs: one server node (broker, MQTT-SN gateway, CoAP
//! and HTTP servers) and one or more client nodes on a shared medium.

use std::collections::HashMap;

use crate::energy::{CpuState, PowerSample, TickCounters};
use crate::engine::{Engine, EventId, Mapped, NodeId, Scheduler, SimEvent, TickTime};
use crate::medium::{
    ConnKey, FrameRecord, Indication, LinkModel, MediumConfig, MediumEvent, Network, RadioMode,
    StreamEvent, StreamParams, TrafficStats,
};
use crate::powertrace::{summarize, Sampler, TraceError, TraceRow};
use crate::protocols::mqtt::{Broker, BrokerOutput, BrokerTimer};
use crate::protocols::mqttsn::{Gateway, GatewayOutput};
use crate::protocols::{coap, http, mqtt, mqttsn, Notice, Output};

use super::config::{Protocol, ScenarioConfig, TimingConfig};

pub const SERVER: NodeId = NodeId(0);
pub const MQTT_PORT: u16 = 1883;
pub const MQTTSN_PORT: u16 = 1884;
pub const COAP_PORT: u16 = 5683;
pub const HTTP_PORT: u16 = 80;
const CLIENT_PORT: u16 = 50_000;

/// A broker session: a stream connection or an MQTT-SN client behind the gateway.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Session {
    Stream(ConnKey),
    Gateway(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum AppTimer {
    Mqtt(mqtt::ClientTimer),
    MqttSn(mqttsn::ClientTimer),
    Coap(coap::RetransmitTimer),
    Http(http::ResponseTimer),
    Broker(Session, u16),
}

#[derive(Debug, Clone, PartialEq)]
enum Ev {
    Medium(MediumEvent),
    CpuIdle,
    Sample,
    AppTick,
    Timer(AppTimer),
}

fn wrap_medium(e: MediumEvent) -> Ev {
    Ev::Medium(e)
}

enum ClientApp {
    Mqtt {
        machine: mqtt::Client,
        conn: Option<ConnKey>,
        inbox: Vec<u8>,
    },
    MqttSn(mqttsn::Client),
    Coap(coap::Client),
    Http {
        machine: http::Client,
        conn: Option<ConnKey>,
    },
}

#[derive(Default)]
struct ServerApp {
    broker: Option<Broker<Session>>,
    gateway: Gateway<NodeId>,
    coap: coap::Server<NodeId>,
    http: http::Server,
    inboxes: HashMap<ConnKey, Vec<u8>>,
}

/// A protocol-level event worth reporting, with its time and node.
#[derive(Debug, Clone, PartialEq)]
pub struct NoticeRecord {
    pub at_s: f64,
    pub node: NodeId,
    pub notice: Notice,
}

/// Extra run knobs used by tests and diagnostics.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub record_frames: bool,
    /// `(src node, 1-based frame ordinal)` pairs whose frames are lost.
    pub forced_losses: Vec<(u16, u64)>,
}

#[derive(Debug, Clone)]
pub struct NodeReport {
    pub node: NodeId,
    pub rows: Vec<TraceRow>,
    pub snapshots: Vec<TickCounters>,
    pub final_counters: TickCounters,
    pub inflight_tx: u64,
    pub traffic: TrafficStats,
}

impl NodeReport {
    pub fn average(&self) -> Result<PowerSample, TraceError> {
        summarize(self.rows.iter().map(|r| &r.power))
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub config: ScenarioConfig,
    pub clients: Vec<NodeReport>,
    pub server: NodeReport,
    pub notices: Vec<NoticeRecord>,
    pub frame_log: Option<Vec<FrameRecord>>,
    pub events_dispatched: u64,
}

impl RunResult {
    /// The first client's trace, the one compared across protocols.
    pub fn client(&self) -> &NodeReport {
        &self.clients[0]
    }

    pub fn failures(&self) -> impl Iterator<Item = &NoticeRecord> {
        self.notices.iter().filter(|n| n.notice.is_failure())
    }

    pub fn count(&self, pred: impl Fn(&Notice) -> bool) -> usize {
        self.notices.iter().filter(|n| pred(&n.notice)).count()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

struct World {
    cfg: ScenarioConfig,
    net: Network,
    clients: Vec<ClientApp>,
    server: ServerApp,
    cpu_busy_until: Vec<TickTime>,
    timers: HashMap<(NodeId, AppTimer), EventId>,
    samplers: Vec<Sampler>,
    notices: Vec<NoticeRecord>,
    payload: Vec<u8>,
    error: Option<TraceError>,
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunResult, RunError> {
    run_scenario_with(cfg, &RunOptions::default())
}

pub fn run_scenario_with(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<RunResult, RunError> {
    cfg.validate().map_err(|(_, msg)| RunError::Invalid(msg))?;
    let nodes = cfg.clients + 1;
    let mode = if cfg.radio.duty_cycled {
        RadioMode::DutyCycled {
            check_rate_hz: cfg.radio.check_rate_hz,
            check_duration: TickTime(cfg.radio.check_duration_ticks),
        }
    } else {
        RadioMode::AlwaysOn
    };
    let mut net = Network::new(
        MediumConfig {
            overheads: cfg.overheads,
            link: LinkModel {
                range_m: cfg.link.range_m,
                tx_success: cfg.link.tx_success,
                rx_success: cfg.link.rx_success,
                positions: cfg.positions(),
            },
            stream: StreamParams {
                retransmit_timeout: TimingConfig::ticks(cfg.timing.stream_retransmit_s),
                max_retries: cfg.timing.stream_max_retries,
            },
        },
        &vec![mode; nodes],
    );
    if opts.record_frames {
        net.record_frames();
    }
    for &(src, ordinal) in &opts.forced_losses {
        net.force_loss(NodeId(src), ordinal);
    }
    net.stream_listen(SERVER, MQTT_PORT);
    net.stream_listen(SERVER, HTTP_PORT);

    let t = &cfg.timing;
    let resource = cfg.topic.0.clone();
    let payload: Vec<u8> = (0..cfg.payload_bytes)
        .map(|i| b'0' + (i % 10) as u8)
        .collect();
    let mut server = ServerApp {
        broker: Some(Broker::new(
            TimingConfig::ticks(t.ack_timeout_s),
            t.max_tries,
        )),
        ..ServerApp::default()
    };
    server.coap.add_resource(&resource, payload.clone());
    server
        .http
        .add_resource(&format!("/{resource}"), payload.clone());

    let clients = (1..nodes)
        .map(|i| match cfg.protocol {
            Protocol::Mqtt => ClientApp::Mqtt {
                machine: mqtt::Client::new(mqtt::ClientConfig {
                    client_id: format!("client-{i}"),
                    topic: resource.clone(),
                    qos: cfg.qos,
                    keep_alive_s: t.keep_alive_s,
                    ack_timeout: TimingConfig::ticks(t.ack_timeout_s),
                    max_tries: t.max_tries,
                    connack_timeout: TimingConfig::ticks(t.ack_timeout_s),
                    subscribe: None,
                }),
                conn: None,
                inbox: Vec::new(),
            },
            Protocol::MqttSn => ClientApp::MqttSn(mqttsn::Client::new(mqttsn::ClientConfig {
                client_id: format!("client-{i}"),
                topic: resource.clone(),
                qos: cfg.qos,
                duration_s: t.keep_alive_s,
                ack_timeout: TimingConfig::ticks(t.ack_timeout_s),
                max_tries: t.max_tries,
            })),
            Protocol::Coap => ClientApp::Coap(coap::Client::new(coap::ClientConfig {
                path: resource.clone(),
                confirmable: t.coap_confirmable,
                token_len: t.coap_token_len,
                ack_timeout: TimingConfig::ticks(t.coap_ack_timeout_s),
                max_retransmit: t.coap_max_retransmit,
            })),
            Protocol::Http => ClientApp::Http {
                machine: http::Client::new(http::ClientConfig {
                    host: "[fd00::1]".into(),
                    path: format!("/{resource}"),
                    response_timeout: TimingConfig::ticks(t.http_response_timeout_s),
                }),
                conn: None,
            },
        })
        .collect();

    let mut world = World {
        cfg: cfg.clone(),
        net,
        clients,
        server,
        cpu_busy_until: vec![TickTime::ZERO; nodes],
        timers: HashMap::new(),
        samplers: (0..nodes)
            .map(|_| Sampler::new(cfg.currents, cfg.interval_s as f64))
            .collect(),
        notices: Vec::new(),
        payload,
        error: None,
    };

    let mut engine: Engine<Ev> = Engine::new(cfg.seed);
    // Sampling boundaries go in first so they precede same-tick traffic.
    for k in 1..=cfg.rows() {
        engine
            .schedule(TickTime::from_secs(k * cfg.interval_s), SERVER, Ev::Sample)
            .expect("future");
    }
    let end = TickTime::from_secs(cfg.duration_s);
    for i in 1..nodes {
        let mut k = 0u64;
        loop {
            let at = TickTime::from_secs_f64(cfg.first_publish_s + k as f64 * cfg.publish_period_s);
            if at >= end {
                break;
            }
            engine
                .schedule(at, NodeId(i as u16), Ev::AppTick)
                .expect("future");
            k += 1;
        }
    }
    world.net.start(&mut Mapped::new(&mut engine, wrap_medium));
    let summary = engine.run(end, |eng, ev| world.dispatch(eng, ev));
    if let Some(e) = world.error {
        return Err(e.into());
    }

    let now = engine.clock();
    let report = |world: &World, i: usize| {
        let node = NodeId(i as u16);
        NodeReport {
            node,
            rows: world.samplers[i].rows().to_vec(),
            snapshots: world.samplers[i].snapshots().to_vec(),
            final_counters: world.net.ledger(node).snapshot(now),
            inflight_tx: world.net.inflight_tx(node, now),
            traffic: world.net.stats(node),
        }
    };
    Ok(RunResult {
        config: cfg.clone(),
        clients: (1..nodes).map(|i| report(&world, i)).collect(),
        server: report(&world, 0),
        notices: world.notices,
        frame_log: opts.record_frames.then(|| world.net.frame_log().to_vec()),
        events_dispatched: summary.dispatched,
    })
}

impl World {
    fn dispatch(&mut self, eng: &mut Engine<Ev>, ev: SimEvent<Ev>) {
        let node = ev.target;
        match ev.payload {
            Ev::Medium(m) => {
                let inds = self.net.handle(node, m, &mut Mapped::new(eng, wrap_medium));
                for ind in inds {
                    self.indication(eng, ind);
                }
            }
            Ev::CpuIdle => {
                let now = eng.clock();
                if self.cpu_busy_until[node.0 as usize] <= now {
                    self.net.ledger_mut(node).set_cpu(CpuState::Lpm, now);
                }
            }
            Ev::Sample => {
                let now = eng.clock();
                for i in 0..self.samplers.len() {
                    let counters = self.net.ledger(NodeId(i as u16)).snapshot(now);
                    if let Err(e) = self.samplers[i].sample(counters) {
                        self.error.get_or_insert(e);
                    }
                }
            }
            Ev::AppTick => self.app_tick(eng, node),
            Ev::Timer(t) => {
                self.timers.remove(&(node, t));
                self.timer(eng, node, t);
            }
        }
    }

    /// Charges CPU-active time for building or parsing one message.
    fn charge(&mut self, eng: &mut Engine<Ev>, node: NodeId, bytes: usize) {
        let now = eng.clock();
        let cost = self.cfg.cpu.ticks(bytes);
        if cost == 0 {
            return;
        }
        let busy = &mut self.cpu_busy_until[node.0 as usize];
        *busy = (*busy).max(now) + TickTime(cost);
        let until = *busy;
        self.net.ledger_mut(node).set_cpu(CpuState::Active, now);
        eng.schedule(until, node, Ev::CpuIdle).expect("future");
    }

    fn notify(&mut self, eng: &Engine<Ev>, node: NodeId, notice: Notice) {
        if notice.is_failure() {
            log::info!("{node} at {}: {notice:?}", eng.clock());
        }
        self.notices.push(NoticeRecord {
            at_s: eng.clock().as_secs_f64(),
            node,
            notice,
        });
    }

    fn set_timer(&mut self, eng: &mut Engine<Ev>, node: NodeId, t: AppTimer, delay: TickTime) {
        if let Some(old) = self.timers.remove(&(node, t)) {
            eng.cancel(old);
        }
        let id = eng.schedule_in(delay, node, Ev::Timer(t));
        self.timers.insert((node, t), id);
    }

    fn cancel_timer(&mut self, eng: &mut Engine<Ev>, node: NodeId, t: AppTimer) {
        if let Some(old) = self.timers.remove(&(node, t)) {
            eng.cancel(old);
        }
    }

    fn client(&mut self, node: NodeId) -> &mut ClientApp {
        &mut self.clients[node.0 as usize - 1]
    }

    fn app_tick(&mut self, eng: &mut Engine<Ev>, node: NodeId) {
        let payload = self.payload.clone();
        match self.client(node) {
            ClientApp::Mqtt { machine, .. } => {
                let out = machine.step(mqtt::ClientInput::AppPublish(payload));
                self.mqtt_outputs(eng, node, out);
            }
            ClientApp::MqttSn(machine) => {
                let out = machine.step(mqttsn::ClientInput::AppPublish(payload));
                self.mqttsn_outputs(eng, node, out);
            }
            ClientApp::Coap(machine) => {
                let out = machine.step(coap::ClientInput::Request);
                self.coap_outputs(eng, node, out);
            }
            ClientApp::Http { machine, .. } => {
                let out = machine.step(http::ClientInput::Request);
                self.http_outputs(eng, node, out);
            }
        }
    }

    fn timer(&mut self, eng: &mut Engine<Ev>, node: NodeId, t: AppTimer) {
        match t {
            AppTimer::Broker(to, msg_id) => {
                let out = self.broker().timeout(BrokerTimer { to, msg_id });
                self.broker_outputs(eng, out);
            }
            AppTimer::Mqtt(t) => {
                if let ClientApp::Mqtt { machine, .. } = self.client(node) {
                    let out = machine.step(mqtt::ClientInput::Timer(t));
                    self.mqtt_outputs(eng, node, out);
                }
            }
            AppTimer::MqttSn(t) => {
                if let ClientApp::MqttSn(machine) = self.client(node) {
                    let out = machine.step(mqttsn::ClientInput::Timer(t));
                    self.mqttsn_outputs(eng, node, out);
                }
            }
            AppTimer::Coap(t) => {
                if let ClientApp::Coap(machine) = self.client(node) {
                    let out = machine.step(coap::ClientInput::Timer(t));
                    self.coap_outputs(eng, node, out);
                }
            }
            AppTimer::Http(t) => {
                if let ClientApp::Http { machine, .. } = self.client(node) {
                    let out = machine.step(http::ClientInput::Timer(t));
                    self.http_outputs(eng, node, out);
                }
            }
        }
    }

    fn broker(&mut self) -> &mut Broker<Session> {
        self.server.broker.as_mut().expect("broker present")
    }

    fn indication(&mut self, eng: &mut Engine<Ev>, ind: Indication) {
        match ind {
            Indication::Datagram {
                node,
                from,
                dst_port,
                payload,
                ..
            } => {
                if node == SERVER {
                    self.server_datagram(eng, from, dst_port, payload);
                } else {
                    self.client_datagram(eng, node, payload);
                }
            }
            Indication::Stream { conn, event } => {
                if conn.node == SERVER {
                    self.server_stream(eng, conn, event);
                } else {
                    self.client_stream(eng, conn, event);
                }
            }
        }
    }

    fn client_datagram(&mut self, eng: &mut Engine<Ev>, node: NodeId, payload: Vec<u8>) {
        self.charge(eng, node, payload.len());
        match self.client(node) {
            ClientApp::MqttSn(machine) => match mqttsn::Packet::decode(&payload) {
                Ok(p) => {
                    let out = machine.step(mqttsn::ClientInput::Inbound(p));
                    self.mqttsn_outputs(eng, node, out);
                }
                Err(e) => self.notify(
                    eng,
                    node,
                    Notice::Dropped(format!("bad MQTT-SN datagram: {e}")),
                ),
            },
            ClientApp::Coap(machine) => match coap::Message::decode(&payload) {
                Ok(m) => {
                    let out = machine.step(coap::ClientInput::Inbound(m));
                    self.coap_outputs(eng, node, out);
                }
                Err(e) => self.notify(
                    eng,
                    node,
                    Notice::Dropped(format!("bad CoAP datagram: {e}")),
                ),
            },
            _ => self.notify(eng, node, Notice::Dropped("unexpected datagram".into())),
        }
    }

    fn client_stream(&mut self, eng: &mut Engine<Ev>, key: ConnKey, event: StreamEvent) {
        let node = key.node;
        let app = self.client(node);
        match app {
            ClientApp::Mqtt {
                machine,
                conn,
                inbox,
            } => {
                if *conn != Some(key) {
                    return;
                }
                let out = match event {
                    StreamEvent::Connected => machine.step(mqtt::ClientInput::TransportUp),
                    StreamEvent::Accepted => Vec::new(),
                    StreamEvent::Closed | StreamEvent::Failed => {
                        *conn = None;
                        inbox.clear();
                        machine.step(mqtt::ClientInput::TransportDown {
                            failed: event == StreamEvent::Failed,
                        })
                    }
                    StreamEvent::Data(bytes) => {
                        inbox.extend_from_slice(&bytes);
                        let mut packets = Vec::new();
                        let mut bad = None;
                        loop {
                            match mqtt::Packet::decode_frame(inbox) {
                                Ok(Some((p, used))) => {
                                    inbox.drain(..used);
                                    packets.push((p, used));
                                }
                                Ok(None) => break,
                                Err(e) => {
                                    inbox.clear();
                                    bad = Some(e);
                                    break;
                                }
                            }
                        }
                        let mut out = Vec::new();
                        for (p, used) in packets {
                            self.charge(eng, node, used);
                            if let ClientApp::Mqtt { machine, .. } = self.client(node) {
                                out.extend(machine.step(mqtt::ClientInput::Inbound(p)));
                            }
                        }
                        if let Some(e) = bad {
                            self.notify(
                                eng,
                                node,
                                Notice::Dropped(format!("bad MQTT stream data: {e}")),
                            );
                        }
                        out
                    }
                };
                self.mqtt_outputs(eng, node, out);
            }
            ClientApp::Http { machine, conn } => {
                if *conn != Some(key) {
                    return;
                }
                let out = match event {
                    StreamEvent::Connected => machine.step(http::ClientInput::TransportUp),
                    StreamEvent::Accepted => Vec::new(),
                    StreamEvent::Closed | StreamEvent::Failed => {
                        *conn = None;
                        machine.step(http::ClientInput::TransportDown {
                            failed: event == StreamEvent::Failed,
                        })
                    }
                    StreamEvent::Data(bytes) => {
                        let len = bytes.len();
                        let out = machine.step(http::ClientInput::Data(bytes));
                        self.charge(eng, node, len);
                        out
                    }
                };
                self.http_outputs(eng, node, out);
            }
            _ => {}
        }
    }

    fn open_stream(&mut self, eng: &mut Engine<Ev>, node: NodeId, port: u16) -> Option<ConnKey> {
        match self
            .net
            .stream_connect(node, SERVER, port, &mut Mapped::new(eng, wrap_medium))
        {
            Ok(k) => Some(k),
            Err(e) => {
                self.notify(eng, node, Notice::Dropped(format!("connect failed: {e}")));
                None
            }
        }
    }

    fn stream_write(&mut self, eng: &mut Engine<Ev>, key: ConnKey, bytes: &[u8]) {
        self.charge(eng, key.node, bytes.len());
        if let Err(e) = self
            .net
            .stream_send(key, bytes, &mut Mapped::new(eng, wrap_medium))
        {
            self.notify(
                eng,
                key.node,
                Notice::Dropped(format!("stream send failed: {e}")),
            );
        }
    }

    fn datagram_write(
        &mut self,
        eng: &mut Engine<Ev>,
        src: NodeId,
        dst: NodeId,
        ports: (u16, u16),
        bytes: &[u8],
    ) {
        self.charge(eng, src, bytes.len());
        if let Err(e) = self.net.datagram_send(
            src,
            dst,
            ports.0,
            ports.1,
            bytes,
            &mut Mapped::new(eng, wrap_medium),
        ) {
            self.notify(
                eng,
                src,
                Notice::Dropped(format!("datagram send failed: {e}")),
            );
        }
    }

    fn mqtt_outputs(&mut self, eng: &mut Engine<Ev>, node: NodeId, out: Vec<mqtt::ClientOutput>) {
        for o in out {
            match o {
                Output::Open => {
                    let key = self.open_stream(eng, node, MQTT_PORT);
                    if let ClientApp::Mqtt { conn, inbox, .. } = self.client(node) {
                        *conn = key;
                        inbox.clear();
                    }
                    if key.is_none() {
                        if let ClientApp::Mqtt { machine, .. } = self.client(node) {
                            let more =
                                machine.step(mqtt::ClientInput::TransportDown { failed: true });
                            self.mqtt_outputs(eng, node, more);
                        }
                    }
                }
                Output::Send(p) => {
                    if let ClientApp::Mqtt {
                        conn: Some(key), ..
                    } = self.client(node)
                    {
                        let key = *key;
                        self.stream_write(eng, key, &p.encode());
                    }
                }
                Output::Close => {
                    if let ClientApp::Mqtt {
                        conn: Some(key), ..
                    } = self.client(node)
                    {
                        let key = *key;
                        let _ = self
                            .net
                            .stream_close(key, &mut Mapped::new(eng, wrap_medium));
                    }
                }
                Output::SetTimer(t, d) => self.set_timer(eng, node, AppTimer::Mqtt(t), d),
                Output::CancelTimer(t) => self.cancel_timer(eng, node, AppTimer::Mqtt(t)),
                Output::Notify(n) => self.notify(eng, node, n),
            }
        }
    }

    fn mqttsn_outputs(
        &mut self,
        eng: &mut Engine<Ev>,
        node: NodeId,
        out: Vec<mqttsn::ClientOutput>,
    ) {
        for o in out {
            match o {
                Output::Send(p) => {
                    self.datagram_write(eng, node, SERVER, (CLIENT_PORT, MQTTSN_PORT), &p.encode())
                }
                Output::SetTimer(t, d) => self.set_timer(eng, node, AppTimer::MqttSn(t), d),
                Output::CancelTimer(t) => self.cancel_timer(eng, node, AppTimer::MqttSn(t)),
                Output::Notify(n) => self.notify(eng, node, n),
                Output::Open | Output::Close => {}
            }
        }
    }

    fn coap_outputs(&mut self, eng: &mut Engine<Ev>, node: NodeId, out: Vec<coap::ClientOutput>) {
        for o in out {
            match o {
                Output::Send(m) => {
                    self.datagram_write(eng, node, SERVER, (CLIENT_PORT, COAP_PORT), &m.encode())
                }
                Output::SetTimer(t, d) => self.set_timer(eng, node, AppTimer::Coap(t), d),
                Output::CancelTimer(t) => self.cancel_timer(eng, node, AppTimer::Coap(t)),
                Output::Notify(n) => self.notify(eng, node, n),
                Output::Open | Output::Close => {}
            }
        }
    }

    fn http_outputs(&mut self, eng: &mut Engine<Ev>, node: NodeId, out: Vec<http::ClientOutput>) {
        for o in out {
            match o {
                Output::Open => {
                    let key = self.open_stream(eng, node, HTTP_PORT);
                    if let ClientApp::Http { conn, machine } = self.client(node) {
                        *conn = key;
                        if key.is_none() {
                            let more =
                                machine.step(http::ClientInput::TransportDown { failed: true });
                            self.http_outputs(eng, node, more);
                        }
                    }
                }
                Output::Send(m) => {
                    if let ClientApp::Http {
                        conn: Some(key), ..
                    } = self.client(node)
                    {
                        let key = *key;
                        self.stream_write(eng, key, &m.encode());
                    }
                }
                Output::Close => {
                    if let ClientApp::Http {
                        conn: Some(key), ..
                    } = self.client(node)
                    {
                        let key = *key;
                        let _ = self
                            .net
                            .stream_close(key, &mut Mapped::new(eng, wrap_medium));
                    }
                }
                Output::SetTimer(t, d) => self.set_timer(eng, node, AppTimer::Http(t), d),
                Output::CancelTimer(t) => self.cancel_timer(eng, node, AppTimer::Http(t)),
                Output::Notify(n) => self.notify(eng, node, n),
            }
        }
    }

    fn server_datagram(&mut self, eng: &mut Engine<Ev>, from: NodeId, port: u16, payload: Vec<u8>) {
        self.charge(eng, SERVER, payload.len());
        match port {
            MQTTSN_PORT => match mqttsn::Packet::decode(&payload) {
                Ok(p) => {
                    let out = self.server.gateway.from_client(from, p);
                    self.gateway_outputs(eng, out);
                }
                Err(e) => self.notify(
                    eng,
                    SERVER,
                    Notice::Dropped(format!("bad MQTT-SN datagram: {e}")),
                ),
            },
            COAP_PORT => match coap::Message::decode(&payload) {
                Ok(m) => {
                    if let Some(reply) = self.server.coap.handle(from, m) {
                        self.datagram_write(
                            eng,
                            SERVER,
                            from,
                            (COAP_PORT, CLIENT_PORT),
                            &reply.encode(),
                        );
                    }
                }
                Err(e) => self.notify(
                    eng,
                    SERVER,
                    Notice::Dropped(format!("bad CoAP datagram: {e}")),
                ),
            },
            other => self.notify(
                eng,
                SERVER,
                Notice::Dropped(format!("datagram to closed port {other}")),
            ),
        }
    }

    fn gateway_outputs(&mut self, eng: &mut Engine<Ev>, out: Vec<GatewayOutput<NodeId>>) {
        for o in out {
            match o {
                GatewayOutput::ToClient(to, p) => {
                    self.datagram_write(eng, SERVER, to, (MQTTSN_PORT, CLIENT_PORT), &p.encode())
                }
                GatewayOutput::ToBroker(from, p) => {
                    let out = self.broker().handle(Session::Gateway(from), p);
                    self.broker_outputs(eng, out);
                }
                GatewayOutput::Diagnostic(d) => self.notify(eng, SERVER, Notice::Dropped(d)),
            }
        }
    }

    fn broker_outputs(&mut self, eng: &mut Engine<Ev>, out: Vec<BrokerOutput<Session>>) {
        for o in out {
            match o {
                BrokerOutput::Send(Session::Stream(key), p) => {
                    self.stream_write(eng, key, &p.encode())
                }
                BrokerOutput::Send(Session::Gateway(node), p) => {
                    let out = self.server.gateway.from_broker(node, p);
                    self.gateway_outputs(eng, out);
                }
                BrokerOutput::SetTimer(t, d) => {
                    self.set_timer(eng, SERVER, AppTimer::Broker(t.to, t.msg_id), d)
                }
                BrokerOutput::CancelTimer(t) => {
                    self.cancel_timer(eng, SERVER, AppTimer::Broker(t.to, t.msg_id))
                }
                BrokerOutput::Diagnostic(d) => self.notify(eng, SERVER, Notice::Dropped(d)),
            }
        }
    }

    fn server_stream(&mut self, eng: &mut Engine<Ev>, key: ConnKey, event: StreamEvent) {
        match event {
            StreamEvent::Accepted => {
                self.server.inboxes.insert(key, Vec::new());
            }
            StreamEvent::Connected => {}
            StreamEvent::Closed | StreamEvent::Failed => {
                self.server.inboxes.remove(&key);
                if key.local_port == MQTT_PORT {
                    let out = self.broker().disconnect(&Session::Stream(key));
                    self.broker_outputs(eng, out);
                }
            }
            StreamEvent::Data(bytes) => {
                let Some(inbox) = self.server.inboxes.get_mut(&key) else {
                    return;
                };
                inbox.extend_from_slice(&bytes);
                match key.local_port {
                    MQTT_PORT => loop {
                        let inbox = self.server.inboxes.get_mut(&key).expect("present");
                        match mqtt::Packet::decode_frame(inbox) {
                            Ok(Some((p, used))) => {
                                inbox.drain(..used);
                                self.charge(eng, SERVER, used);
                                let out = self.broker().handle(Session::Stream(key), p);
                                self.broker_outputs(eng, out);
                            }
                            Ok(None) => break,
                            Err(e) => {
                                inbox.clear();
                                self.notify(
                                    eng,
                                    SERVER,
                                    Notice::Dropped(format!("bad MQTT stream data: {e}")),
                                );
                                break;
                            }
                        }
                    },
                    HTTP_PORT => {
                        let inbox = self.server.inboxes.get_mut(&key).expect("present");
                        match http::Request::decode_frame(inbox) {
                            Ok(Some((req, used))) => {
                                inbox.drain(..used);
                                self.charge(eng, SERVER, used);
                                let resp = self.server.http.handle(&req);
                                self.stream_write(eng, key, &resp.encode());
                            }
                            Ok(None) => {}
                            Err(e) => {
                                inbox.clear();
                                let resp = http::Response::new(400, Vec::new());
                                self.notify(
                                    eng,
                                    SERVER,
                                    Notice::Dropped(format!("bad HTTP request: {e}")),
                                );
                                self.stream_write(eng, key, &resp.encode());
                            }
                        }
                    }
                    _ => {}
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(p: Protocol) -> ScenarioConfig {
        ScenarioConfig::new(p)
    }

    #[test]
    fn every_protocol_runs_clean() {
        for p in Protocol::ALL {
            let r = run_scenario(&cfg(p)).unwrap();
            assert_eq!(r.client().rows.len(), 10, "{p}");
            assert_eq!(
                r.failures().count(),
                0,
                "{p}: {:?}",
                r.failures().collect::<Vec<_>>()
            );
            let ok = r.count(|n| {
                matches!(
                    n,
                    Notice::Delivered { .. }
                        | Notice::Response {
                            status: 200 | 205,
                            ..
                        }
                )
            });
            assert_eq!(ok, 20, "{p}");
        }
    }

    #[test]
    fn same_seed_same_trace() {
        let a = run_scenario(&cfg(Protocol::Coap)).unwrap();
        let b = run_scenario(&cfg(Protocol::Coap)).unwrap();
        assert_eq!(a.client().rows, b.client().rows);
    }

    #[test]
    fn http_cycle_is_nine_frames() {
        let mut c = cfg(Protocol::Http);
        c.duration_s = 10;
        c.publish_period_s = 20.0;
        let r = run_scenario_with(
            &c,
            &RunOptions {
                record_frames: true,
                ..RunOptions::default()
            },
        )
        .unwrap();
        assert_eq!(r.frame_log.unwrap().len(), 9);
    }

    #[test]
    fn coap_con_lost_request_is_retransmitted() {
        let mut c = cfg(Protocol::Coap);
        c.duration_s = 10;
        c.publish_period_s = 20.0;
        let r = run_scenario_with(
            &c,
            &RunOptions {
                record_frames: true,
                forced_losses: vec![(1, 1)],
            },
        )
        .unwrap();
        let log = r.frame_log.clone().unwrap();
        let from_client: Vec<_> = log.iter().filter(|f| f.frame.src == NodeId(1)).collect();
        assert_eq!(from_client.len(), 2);
        let gap = from_client[1].at.0 - from_client[0].at.0;
        assert!(
            gap >= TickTime::from_secs(2).0 && gap < TickTime::from_secs(2).0 + 200,
            "gap {gap}"
        );
        assert_eq!(
            r.count(|n| matches!(n, Notice::Response { status: 205, .. })),
            1
        );
    }

    #[test]
    fn mqtt_lost_puback_gives_one_broker_acceptance() {
        let mut c = cfg(Protocol::Mqtt);
        c.duration_s = 20;
        c.publish_period_s = 30.0;
        c.link.rx_success = 0.6;
        for seed in 0..20 {
            c.seed = seed;
            let r = run_scenario(&c).unwrap();
            let delivered = r.count(|n| matches!(n, Notice::Delivered { .. }));
            assert!(delivered <= 1);
        }
    }
}
