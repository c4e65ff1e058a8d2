//! Unit-disk radio medium, per-node radio/MAC, and the two transport services.
//!
//! Each node owns an [`EnergestLedger`]; the medium drives its radio half
//! (TX/RX/OFF) while the node's software drives the CPU half through
//! [`Network::ledger_mut`]. Frames are sent through a per-node FIFO MAC queue:
//! a node never starts transmitting while it is sending or receiving.
//!
//! Duty-cycled radios sleep between periodic channel checks. Senders are
//! assumed phase-locked to their receivers, so an in-range duty-cycled node
//! always wakes for an incoming frame and pays RX only for its airtime.

mod headers;
mod stream;

use std::collections::{HashSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::{EnergestLedger, RadioState};
use crate::engine::{EventId, NodeId, Scheduler, TickTime, RTIMER_HZ};

pub use headers::{
    DatagramHeader, SegmentHeader, SegmentKind, DATAGRAM_HEADER_MIN, STREAM_HEADER_MIN,
};
pub use stream::{ConnKey, ConnState, StreamEvent};

use stream::Conn;

/// On-air bit rate of the modeled transceiver.
pub const RADIO_BITRATE_BPS: u64 = 250_000;

/// Airtime of a frame in RTimer ticks, rounded up.
pub fn airtime_ticks(length_bytes: usize) -> u64 {
    let bits = length_bytes as u64 * 8;
    (bits * RTIMER_HZ).div_ceil(RADIO_BITRATE_BPS)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MediumError {
    #[error("frame of {length} bytes exceeds the {mtu}-byte MTU")]
    Oversize { length: usize, mtu: usize },
    #[error("{0} is already transmitting")]
    RadioBusy(NodeId),
    #[error("connection {0:?} is not established (state {1:?})")]
    NotEstablished(ConnKey, ConnState),
    #[error("unknown connection {0:?}")]
    UnknownConnection(ConnKey),
    #[error("malformed transport header")]
    MalformedHeader,
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Overheads {
    pub link_bytes: usize,
    pub datagram_bytes: usize,
    pub stream_bytes: usize,
    pub mtu_bytes: usize,
}

impl Default for Overheads {
    fn default() -> Self {
        Overheads {
            link_bytes: 9,
            datagram_bytes: 21,
            stream_bytes: 41,
            mtu_bytes: 127,
        }
    }
}

impl Overheads {
    pub fn validate(&self) -> Result<(), String> {
        if self.datagram_bytes < DATAGRAM_HEADER_MIN {
            return Err(format!(
                "datagram_bytes must be at least {DATAGRAM_HEADER_MIN}"
            ));
        }
        if self.stream_bytes < STREAM_HEADER_MIN {
            return Err(format!("stream_bytes must be at least {STREAM_HEADER_MIN}"));
        }
        if self.link_bytes + self.stream_bytes.max(self.datagram_bytes) >= self.mtu_bytes {
            return Err("headers leave no room for payload within the MTU".into());
        }
        Ok(())
    }

    /// Largest stream segment payload.
    pub fn stream_mss(&self) -> usize {
        self.mtu_bytes - self.link_bytes - self.stream_bytes
    }

    pub fn max_datagram_payload(&self) -> usize {
        self.mtu_bytes - self.link_bytes - self.datagram_bytes
    }
}

/// Unit disk graph link parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkModel {
    pub range_m: f64,
    pub tx_success: f64,
    pub rx_success: f64,
    pub positions: Vec<(f64, f64)>,
}

impl LinkModel {
    pub fn in_range(&self, a: NodeId, b: NodeId) -> bool {
        let (pa, pb) = (self.positions[a.0 as usize], self.positions[b.0 as usize]);
        let d = ((pa.0 - pb.0).powi(2) + (pa.1 - pb.1).powi(2)).sqrt();
        d <= self.range_m
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RadioMode {
    AlwaysOn,
    DutyCycled {
        check_rate_hz: f64,
        check_duration: TickTime,
    },
}

impl RadioMode {
    fn check_period(&self) -> Option<TickTime> {
        match *self {
            RadioMode::AlwaysOn => None,
            RadioMode::DutyCycled { check_rate_hz, .. } => Some(TickTime(
                ((RTIMER_HZ as f64 / check_rate_hz).round() as u64).max(1),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamParams {
    pub retransmit_timeout: TickTime,
    pub max_retries: u32,
}

impl Default for StreamParams {
    fn default() -> Self {
        StreamParams {
            retransmit_timeout: TickTime::from_secs_f64(0.5),
            max_retries: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dest {
    Node(NodeId),
    Broadcast,
}

impl Dest {
    fn accepts(self, node: NodeId) -> bool {
        match self {
            Dest::Node(n) => n == node,
            Dest::Broadcast => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RadioFrame {
    pub src: NodeId,
    pub dst: Dest,
    pub length_bytes: usize,
    pub payload: Vec<u8>,
}

impl RadioFrame {
    pub fn new(
        src: NodeId,
        dst: Dest,
        payload: Vec<u8>,
        overheads: &Overheads,
    ) -> Result<Self, MediumError> {
        let length_bytes = payload.len() + overheads.link_bytes;
        if length_bytes > overheads.mtu_bytes {
            return Err(MediumError::Oversize {
                length: length_bytes,
                mtu: overheads.mtu_bytes,
            });
        }
        Ok(RadioFrame {
            src,
            dst,
            length_bytes,
            payload,
        })
    }
}

/// Events the medium schedules for itself.
#[derive(Debug, Clone, PartialEq)]
pub enum MediumEvent {
    ChannelCheck,
    RadioIdle,
    FrameEnd(RadioFrame),
    MacService,
    StreamTimer { conn: ConnKey, seq: u32 },
}

/// What the medium hands up to node software.
#[derive(Debug, Clone, PartialEq)]
pub enum Indication {
    Datagram {
        node: NodeId,
        from: NodeId,
        src_port: u16,
        dst_port: u16,
        payload: Vec<u8>,
    },
    Stream {
        conn: ConnKey,
        event: StreamEvent,
    },
}

/// One transmitted frame, recorded when frame logging is on.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub at: TickTime,
    pub frame: RadioFrame,
    pub airtime: u64,
    pub delivered_to: Vec<NodeId>,
}

impl FrameRecord {
    pub fn segment_kind(&self, overheads: &Overheads) -> Option<SegmentKind> {
        SegmentHeader::read(&self.frame.payload, overheads.stream_bytes)
            .ok()
            .map(|(h, _)| h.kind())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrafficStats {
    pub frames_sent: u64,
    pub airtime_sent: u64,
    pub frames_received: u64,
}

#[derive(Debug)]
struct Radio {
    ledger: EnergestLedger,
    mode: RadioMode,
    tx_until: TickTime,
    rx_until: TickTime,
    check_until: TickTime,
    queue: VecDeque<RadioFrame>,
    mac_wakeup: Option<(TickTime, EventId)>,
    stats: TrafficStats,
}

impl Radio {
    fn desired(&self, now: TickTime) -> RadioState {
        if self.tx_until > now {
            RadioState::Tx
        } else if self.rx_until > now || self.check_until > now || self.mode == RadioMode::AlwaysOn
        {
            RadioState::Rx
        } else {
            RadioState::Off
        }
    }

    fn refresh(&mut self, now: TickTime) {
        let want = self.desired(now);
        if want != self.ledger.radio_state() {
            self.ledger.set_radio(want, now);
        }
    }

    fn busy_until(&self) -> TickTime {
        self.tx_until.max(self.rx_until)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MediumConfig {
    pub overheads: Overheads,
    pub link: LinkModel,
    pub stream: StreamParams,
}

#[derive(Debug)]
pub struct Network {
    config: MediumConfig,
    radios: Vec<Radio>,
    conns: std::collections::HashMap<ConnKey, Conn>,
    listeners: HashSet<(NodeId, u16)>,
    next_ephemeral: Vec<u16>,
    forced_losses: HashSet<(NodeId, u64)>,
    frame_log: Option<Vec<FrameRecord>>,
}

impl Network {
    /// A network with one radio per entry of `config.link.positions`.
    pub fn new(config: MediumConfig, modes: &[RadioMode]) -> Self {
        let n = config.link.positions.len();
        assert_eq!(modes.len(), n, "one radio mode per node");
        let radios = modes
            .iter()
            .map(|&mode| Radio {
                ledger: EnergestLedger::default(),
                mode,
                tx_until: TickTime::ZERO,
                rx_until: TickTime::ZERO,
                check_until: TickTime::ZERO,
                queue: VecDeque::new(),
                mac_wakeup: None,
                stats: TrafficStats::default(),
            })
            .collect();
        Network {
            config,
            radios,
            conns: Default::default(),
            listeners: HashSet::new(),
            next_ephemeral: vec![49_152; n],
            forced_losses: HashSet::new(),
            frame_log: None,
        }
    }

    pub fn config(&self) -> &MediumConfig {
        &self.config
    }

    pub fn node_count(&self) -> usize {
        self.radios.len()
    }

    pub fn ledger(&self, node: NodeId) -> &EnergestLedger {
        &self.radios[node.0 as usize].ledger
    }

    pub fn ledger_mut(&mut self, node: NodeId) -> &mut EnergestLedger {
        &mut self.radios[node.0 as usize].ledger
    }

    pub fn stats(&self, node: NodeId) -> TrafficStats {
        self.radios[node.0 as usize].stats
    }

    /// Ticks of transmission still ahead of `now` for a frame already on air.
    pub fn inflight_tx(&self, node: NodeId, now: TickTime) -> u64 {
        self.radios[node.0 as usize]
            .tx_until
            .saturating_sub(now)
            .ticks()
    }

    /// Drops, for every receiver, the `ordinal`-th frame (1-based) sent by `src`.
    pub fn force_loss(&mut self, src: NodeId, ordinal: u64) {
        self.forced_losses.insert((src, ordinal));
    }

    pub fn record_frames(&mut self) {
        self.frame_log.get_or_insert_with(Vec::new);
    }

    pub fn frame_log(&self) -> &[FrameRecord] {
        self.frame_log.as_deref().unwrap_or(&[])
    }

    /// Powers up radios and schedules the first channel checks.
    pub fn start(&mut self, sched: &mut impl Scheduler<MediumEvent>) {
        let now = sched.now();
        for (i, radio) in self.radios.iter_mut().enumerate() {
            radio.refresh(now);
            if radio.mode.check_period().is_some() {
                sched.schedule_in(TickTime::ZERO, NodeId(i as u16), MediumEvent::ChannelCheck);
            }
        }
    }

    pub fn handle(
        &mut self,
        node: NodeId,
        event: MediumEvent,
        sched: &mut impl Scheduler<MediumEvent>,
    ) -> Vec<Indication> {
        let now = sched.now();
        match event {
            MediumEvent::ChannelCheck => {
                self.channel_check(node, sched);
                Vec::new()
            }
            MediumEvent::RadioIdle => {
                self.radios[node.0 as usize].refresh(now);
                Vec::new()
            }
            MediumEvent::MacService => {
                let radio = &mut self.radios[node.0 as usize];
                if matches!(radio.mac_wakeup, Some((at, _)) if at <= now) {
                    radio.mac_wakeup = None;
                }
                self.mac_service(node, sched);
                Vec::new()
            }
            MediumEvent::FrameEnd(frame) => {
                self.radios[node.0 as usize].refresh(now);
                self.radios[node.0 as usize].stats.frames_received += 1;
                self.receive(node, frame, sched)
            }
            MediumEvent::StreamTimer { conn, seq } => self.stream_timeout(conn, seq, sched),
        }
    }

    fn channel_check(&mut self, node: NodeId, sched: &mut impl Scheduler<MediumEvent>) {
        let now = sched.now();
        let radio = &mut self.radios[node.0 as usize];
        let RadioMode::DutyCycled { check_duration, .. } = radio.mode else {
            return;
        };
        let period = radio.mode.check_period().expect("duty cycled");
        sched.schedule_in(period, node, MediumEvent::ChannelCheck);
        let idle = radio.tx_until <= now && radio.rx_until <= now && radio.check_until <= now;
        if idle && radio.queue.is_empty() && !check_duration.ticks().eq(&0) {
            radio.check_until = now + check_duration;
            radio.refresh(now);
            sched
                .schedule_at(radio.check_until, node, MediumEvent::RadioIdle)
                .expect("future");
        }
    }

    /// Queues a frame on the sender's MAC; it goes on air as soon as the radio is free.
    pub fn send_frame(
        &mut self,
        frame: RadioFrame,
        sched: &mut impl Scheduler<MediumEvent>,
    ) -> Result<(), MediumError> {
        if frame.length_bytes > self.config.overheads.mtu_bytes {
            return Err(MediumError::Oversize {
                length: frame.length_bytes,
                mtu: self.config.overheads.mtu_bytes,
            });
        }
        let src = frame.src;
        self.radio(src)?.queue.push_back(frame);
        self.mac_service(src, sched);
        Ok(())
    }

    fn radio(&mut self, node: NodeId) -> Result<&mut Radio, MediumError> {
        self.radios
            .get_mut(node.0 as usize)
            .ok_or(MediumError::UnknownNode(node))
    }

    fn mac_service(&mut self, node: NodeId, sched: &mut impl Scheduler<MediumEvent>) {
        let now = sched.now();
        let radio = &mut self.radios[node.0 as usize];
        if radio.queue.is_empty() {
            return;
        }
        let busy = radio.busy_until();
        if busy > now {
            match radio.mac_wakeup {
                Some((at, _)) if at >= busy => {}
                Some((_, id)) => {
                    sched.cancel(id);
                    let id = sched
                        .schedule_at(busy, node, MediumEvent::MacService)
                        .expect("future");
                    radio.mac_wakeup = Some((busy, id));
                }
                None => {
                    let id = sched
                        .schedule_at(busy, node, MediumEvent::MacService)
                        .expect("future");
                    radio.mac_wakeup = Some((busy, id));
                }
            }
            return;
        }
        let frame = radio.queue.pop_front().expect("non-empty");
        self.broadcast(frame, sched).expect("radio checked idle");
        let radio = &mut self.radios[node.0 as usize];
        if !radio.queue.is_empty() && radio.mac_wakeup.is_none() {
            let at = radio.tx_until;
            let id = sched
                .schedule_at(at, node, MediumEvent::MacService)
                .expect("future");
            radio.mac_wakeup = Some((at, id));
        }
    }

    /// Puts a frame on air now. The sender is in TX for the frame's airtime;
    /// every in-range node that is not itself transmitting is in RX for the
    /// same span. Addressed receivers get the frame if the link draws pass.
    /// Returns the nodes a delivery was scheduled for.
    pub fn broadcast(
        &mut self,
        frame: RadioFrame,
        sched: &mut impl Scheduler<MediumEvent>,
    ) -> Result<Vec<NodeId>, MediumError> {
        let now = sched.now();
        let src = frame.src;
        if frame.length_bytes > self.config.overheads.mtu_bytes {
            return Err(MediumError::Oversize {
                length: frame.length_bytes,
                mtu: self.config.overheads.mtu_bytes,
            });
        }
        let airtime = airtime_ticks(frame.length_bytes);
        let end = now + TickTime(airtime);
        let radio = self.radio(src)?;
        if radio.tx_until > now {
            return Err(MediumError::RadioBusy(src));
        }
        radio.tx_until = end;
        radio.check_until = radio.check_until.min(now);
        radio.refresh(now);
        radio.stats.frames_sent += 1;
        radio.stats.airtime_sent += airtime;
        let ordinal = radio.stats.frames_sent;
        sched
            .schedule_at(end, src, MediumEvent::RadioIdle)
            .expect("future");

        let forced = self.forced_losses.contains(&(src, ordinal));
        let tx_ok = sched.uniform() < self.config.link.tx_success;
        let mut delivered = Vec::new();
        for i in 0..self.radios.len() {
            let rx = NodeId(i as u16);
            if rx == src || !self.config.link.in_range(src, rx) {
                continue;
            }
            let radio = &mut self.radios[i];
            if radio.tx_until > now {
                continue;
            }
            radio.rx_until = radio.rx_until.max(end);
            radio.refresh(now);
            sched
                .schedule_at(end, rx, MediumEvent::RadioIdle)
                .expect("future");
            let rx_ok = sched.uniform() < self.config.link.rx_success;
            if frame.dst.accepts(rx) && tx_ok && rx_ok && !forced {
                sched
                    .schedule_at(end, rx, MediumEvent::FrameEnd(frame.clone()))
                    .expect("future");
                delivered.push(rx);
            }
        }
        if let Some(log) = self.frame_log.as_mut() {
            log.push(FrameRecord {
                at: now,
                frame,
                airtime,
                delivered_to: delivered.clone(),
            });
        }
        Ok(delivered)
    }

    /// Sends one connectionless datagram; no acknowledgment or retransmission.
    pub fn datagram_send(
        &mut self,
        src: NodeId,
        dst: NodeId,
        src_port: u16,
        dst_port: u16,
        payload: &[u8],
        sched: &mut impl Scheduler<MediumEvent>,
    ) -> Result<(), MediumError> {
        let o = self.config.overheads;
        let length = payload.len() + o.datagram_bytes + o.link_bytes;
        if length > o.mtu_bytes {
            return Err(MediumError::Oversize {
                length,
                mtu: o.mtu_bytes,
            });
        }
        let mut buf = Vec::with_capacity(o.datagram_bytes + payload.len());
        DatagramHeader {
            src_port,
            dst_port,
            length: payload.len() as u16,
        }
        .write(o.datagram_bytes, &mut buf);
        buf.extend_from_slice(payload);
        let frame = RadioFrame::new(src, Dest::Node(dst), buf, &o)?;
        self.send_frame(frame, sched)
    }

    fn receive(
        &mut self,
        node: NodeId,
        frame: RadioFrame,
        sched: &mut impl Scheduler<MediumEvent>,
    ) -> Vec<Indication> {
        let o = self.config.overheads;
        match frame.payload.first() {
            Some(&headers::PROTO_DATAGRAM) => {
                match DatagramHeader::read(&frame.payload, o.datagram_bytes) {
                    Ok((h, body)) => vec![Indication::Datagram {
                        node,
                        from: frame.src,
                        src_port: h.src_port,
                        dst_port: h.dst_port,
                        payload: body.to_vec(),
                    }],
                    Err(e) => {
                        log::warn!("{node}: dropping datagram from {}: {e}", frame.src);
                        Vec::new()
                    }
                }
            }
            Some(&headers::PROTO_STREAM) => {
                match SegmentHeader::read(&frame.payload, o.stream_bytes) {
                    Ok((h, body)) => self.on_segment(node, frame.src, h, body.to_vec(), sched),
                    Err(e) => {
                        log::warn!("{node}: dropping segment from {}: {e}", frame.src);
                        Vec::new()
                    }
                }
            }
            _ => Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::CpuState;
    use crate::engine::Engine;

    fn network(distance: f64, success: f64, modes: [RadioMode; 2]) -> Network {
        Network::new(
            MediumConfig {
                overheads: Overheads::default(),
                link: LinkModel {
                    range_m: 50.0,
                    tx_success: 1.0,
                    rx_success: success,
                    positions: vec![(0.0, 0.0), (distance, 0.0)],
                },
                stream: StreamParams::default(),
            },
            &modes,
        )
    }

    const DC: RadioMode = RadioMode::DutyCycled {
        check_rate_hz: 8.0,
        check_duration: TickTime(8),
    };

    fn run(net: &mut Network, eng: &mut Engine<MediumEvent>, until: TickTime) -> Vec<Indication> {
        let mut out = Vec::new();
        eng.run(until, |e, ev| {
            out.extend(net.handle(ev.target, ev.payload, e))
        });
        out
    }

    #[test]
    fn airtime_examples() {
        assert_eq!(airtime_ticks(0), 0);
        assert_eq!(airtime_ticks(125), 132);
        assert_eq!(airtime_ticks(1), 2);
    }

    #[test]
    fn in_range_lossless_delivers_once() {
        let mut net = network(10.0, 1.0, [RadioMode::AlwaysOn; 2]);
        let mut eng = Engine::new(1);
        let frame = RadioFrame::new(
            NodeId(0),
            Dest::Node(NodeId(1)),
            vec![0xAB; 10],
            &Overheads::default(),
        )
        .unwrap();
        let delivered = net.broadcast(frame, &mut eng).unwrap();
        assert_eq!(delivered, vec![NodeId(1)]);
    }

    #[test]
    fn out_of_range_never_delivers() {
        let mut net = network(60.0, 1.0, [RadioMode::AlwaysOn; 2]);
        let mut eng = Engine::new(1);
        net.start(&mut eng);
        let frame = RadioFrame::new(
            NodeId(0),
            Dest::Broadcast,
            vec![1; 10],
            &Overheads::default(),
        )
        .unwrap();
        assert!(net.broadcast(frame, &mut eng).unwrap().is_empty());
        run(&mut net, &mut eng, TickTime(100));
        // always-on receiver: RX for the whole span regardless; no extra from the frame
        assert_eq!(net.ledger(NodeId(1)).snapshot(TickTime(100)).rx, 100);
    }

    #[test]
    fn lost_frame_still_costs_both_sides() {
        let off = RadioMode::DutyCycled {
            check_rate_hz: 1.0,
            check_duration: TickTime(0),
        };
        let mut net = network(10.0, 0.0, [off, off]);
        let mut eng = Engine::new(1);
        net.start(&mut eng);
        let frame = RadioFrame::new(
            NodeId(0),
            Dest::Node(NodeId(1)),
            vec![1; 30],
            &Overheads::default(),
        )
        .unwrap();
        let air = airtime_ticks(frame.length_bytes);
        assert!(net.broadcast(frame, &mut eng).unwrap().is_empty());
        let ind = run(&mut net, &mut eng, TickTime(1000));
        assert!(ind.is_empty());
        assert_eq!(net.ledger(NodeId(0)).snapshot(TickTime(1000)).tx, air);
        assert_eq!(net.ledger(NodeId(1)).snapshot(TickTime(1000)).rx, air);
    }

    #[test]
    fn oversize_frame_rejected() {
        let err = RadioFrame::new(
            NodeId(0),
            Dest::Broadcast,
            vec![0; 119],
            &Overheads::default(),
        )
        .unwrap_err();
        assert_eq!(
            err,
            MediumError::Oversize {
                length: 128,
                mtu: 127
            }
        );
    }

    #[test]
    fn duty_cycle_idle_checks() {
        let mut net = network(10.0, 1.0, [DC, DC]);
        let mut eng = Engine::new(1);
        net.start(&mut eng);
        let end = TickTime::from_secs(10);
        run(&mut net, &mut eng, end);
        assert_eq!(net.ledger(NodeId(0)).snapshot(end).rx, 8 * 10 * 8);
    }

    #[test]
    fn always_on_idle_listens_whole_interval() {
        let mut net = network(10.0, 1.0, [RadioMode::AlwaysOn; 2]);
        let mut eng = Engine::new(1);
        net.start(&mut eng);
        let end = TickTime::from_secs(10);
        run(&mut net, &mut eng, end);
        let c = net.ledger(NodeId(0)).snapshot(end);
        assert_eq!(c.rx, end.ticks());
        assert_eq!(c.cpu + c.lpm, end.ticks());
    }

    #[test]
    fn frame_mid_check_extends_rx() {
        let mut net = network(10.0, 1.0, [DC, DC]);
        let mut eng = Engine::new(1);
        net.start(&mut eng);
        // node1 checks during [0, 8); a 40-byte frame from node0 starting at tick 4 ends at 46
        eng.run(TickTime(4), |e, ev| {
            net.handle(ev.target, ev.payload, e);
        });
        let frame = RadioFrame::new(
            NodeId(0),
            Dest::Node(NodeId(1)),
            vec![0; 31],
            &Overheads::default(),
        )
        .unwrap();
        let air = airtime_ticks(frame.length_bytes);
        assert_eq!(air, 42);
        net.broadcast(frame, &mut eng).unwrap();
        let until = TickTime(4095);
        run(&mut net, &mut eng, until);
        assert_eq!(net.ledger(NodeId(1)).snapshot(until).rx, 4 + air);
        // sender: its own check was cut short at tick 4
        let c0 = net.ledger(NodeId(0)).snapshot(until);
        assert_eq!((c0.rx, c0.tx), (4, air));
    }

    #[test]
    fn pending_traffic_preempts_checks() {
        let mut net = network(10.0, 1.0, [DC, DC]);
        let mut eng = Engine::new(1);
        // Two frames queued at tick 0, before the first check fires.
        for _ in 0..2 {
            let f = RadioFrame::new(
                NodeId(0),
                Dest::Node(NodeId(1)),
                vec![0; 100],
                &Overheads::default(),
            )
            .unwrap();
            net.send_frame(f, &mut eng).unwrap();
        }
        net.start(&mut eng);
        let until = TickTime(4000);
        run(&mut net, &mut eng, until);
        let c0 = net.ledger(NodeId(0)).snapshot(until);
        assert_eq!(c0.tx, 2 * airtime_ticks(109));
        assert_eq!(
            c0.rx, 0,
            "the tick-0 check was skipped while frames were pending"
        );
        assert_eq!(net.stats(NodeId(1)).frames_received, 2);
    }

    #[test]
    fn datagram_frame_size_and_limits() {
        let mut net = network(10.0, 1.0, [RadioMode::AlwaysOn; 2]);
        net.record_frames();
        let mut eng = Engine::new(1);
        net.datagram_send(NodeId(0), NodeId(1), 5000, 5683, &[7; 10], &mut eng)
            .unwrap();
        assert_eq!(net.frame_log()[0].frame.length_bytes, 40);
        assert_eq!(
            net.datagram_send(NodeId(0), NodeId(1), 1, 2, &[0; 200], &mut eng),
            Err(MediumError::Oversize {
                length: 230,
                mtu: 127
            })
        );
        let ind = run(&mut net, &mut eng, TickTime(1000));
        assert_eq!(
            ind,
            vec![Indication::Datagram {
                node: NodeId(1),
                from: NodeId(0),
                src_port: 5000,
                dst_port: 5683,
                payload: vec![7; 10]
            }]
        );
    }

    #[test]
    fn datagram_loss_is_silent() {
        let mut net = network(10.0, 1.0, [RadioMode::AlwaysOn; 2]);
        net.record_frames();
        net.force_loss(NodeId(0), 1);
        let mut eng = Engine::new(1);
        net.datagram_send(NodeId(0), NodeId(1), 1, 2, b"x", &mut eng)
            .unwrap();
        assert!(run(&mut net, &mut eng, TickTime::from_secs(5)).is_empty());
        assert_eq!(net.frame_log().len(), 1);
    }

    #[test]
    fn tx_ticks_match_airtime_sum() {
        let mut net = network(10.0, 1.0, [DC, DC]);
        let mut eng = Engine::new(3);
        net.start(&mut eng);
        for len in [1usize, 17, 50, 97] {
            net.datagram_send(NodeId(0), NodeId(1), 1, 2, &vec![0; len], &mut eng)
                .unwrap();
        }
        let until = TickTime::from_secs(1);
        run(&mut net, &mut eng, until);
        let stats = net.stats(NodeId(0));
        assert_eq!(stats.frames_sent, 4);
        assert_eq!(net.ledger(NodeId(0)).snapshot(until).tx, stats.airtime_sent);
        let c = net.ledger(NodeId(1)).snapshot(until);
        assert_eq!(c.cpu + c.lpm, until.ticks());
        assert_eq!(net.ledger(NodeId(0)).cpu_state(), CpuState::Lpm);
    }
}
