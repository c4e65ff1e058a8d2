//! Reliable, connection-oriented byte stream over the radio medium.
//!
//! A deliberately small TCP stand-in: three-way handshake, one outstanding
//! segment per direction (stop-and-wait), a per-segment ACK frame, fixed
//! retransmission timeout with a retry budget, and a two-frame FIN/ACK close.

use std::collections::VecDeque;

use super::headers::{flags, SegmentHeader};
use super::{Dest, Indication, MediumError, MediumEvent, Network, RadioFrame};
use crate::engine::{EventId, NodeId, Scheduler};

/// Local handle of one connection endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ConnKey {
    pub node: NodeId,
    pub local_port: u16,
    pub peer: NodeId,
    pub peer_port: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnState {
    Closed,
    SynSent,
    SynReceived,
    Established,
    Closing,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StreamEvent {
    /// Active open completed.
    Connected,
    /// Passive open completed on a listening port.
    Accepted,
    Data(Vec<u8>),
    /// Orderly close, by either side.
    Closed,
    /// Retransmission budget exhausted.
    Failed,
}

#[derive(Debug)]
enum Outgoing {
    Data(Vec<u8>),
    Fin,
}

#[derive(Debug)]
struct InFlight {
    seq: u32,
    flags: u8,
    data: Vec<u8>,
    retries: u32,
    timer: EventId,
}

#[derive(Debug)]
pub(super) struct Conn {
    state: ConnState,
    queue: VecDeque<Outgoing>,
    next_seq: u32,
    expected: u32,
    in_flight: Option<InFlight>,
}

impl Conn {
    fn new(state: ConnState) -> Self {
        Conn {
            state,
            queue: VecDeque::new(),
            next_seq: 1,
            expected: 1,
            in_flight: None,
        }
    }
}

impl Network {
    pub fn stream_listen(&mut self, node: NodeId, port: u16) {
        self.listeners.insert((node, port));
    }

    pub fn stream_state(&self, conn: ConnKey) -> ConnState {
        self.conns.get(&conn).map_or(ConnState::Closed, |c| c.state)
    }

    /// Opens a connection from an ephemeral port on `src`; sends SYN.
    pub fn stream_connect(
        &mut self,
        src: NodeId,
        dst: NodeId,
        dst_port: u16,
        sched: &mut impl Scheduler<MediumEvent>,
    ) -> Result<ConnKey, MediumError> {
        let port_slot = self
            .next_ephemeral
            .get_mut(src.0 as usize)
            .ok_or(MediumError::UnknownNode(src))?;
        let local_port = *port_slot;
        *port_slot = port_slot.checked_add(1).unwrap_or(49_152);
        let key = ConnKey {
            node: src,
            local_port,
            peer: dst,
            peer_port: dst_port,
        };
        self.conns.insert(key, Conn::new(ConnState::SynSent));
        self.send_tracked(key, flags::SYN, 0, Vec::new(), sched)?;
        Ok(key)
    }

    /// Queues application bytes, split into MSS-sized segments.
    pub fn stream_send(
        &mut self,
        key: ConnKey,
        bytes: &[u8],
        sched: &mut impl Scheduler<MediumEvent>,
    ) -> Result<(), MediumError> {
        let mss = self.config.overheads.stream_mss();
        let conn = self
            .conns
            .get_mut(&key)
            .ok_or(MediumError::UnknownConnection(key))?;
        if conn.state != ConnState::Established {
            return Err(MediumError::NotEstablished(key, conn.state));
        }
        for chunk in bytes.chunks(mss) {
            conn.queue.push_back(Outgoing::Data(chunk.to_vec()));
        }
        self.pump(key, sched)
    }

    /// Closes after all queued data has been acknowledged.
    pub fn stream_close(
        &mut self,
        key: ConnKey,
        sched: &mut impl Scheduler<MediumEvent>,
    ) -> Result<(), MediumError> {
        let conn = self
            .conns
            .get_mut(&key)
            .ok_or(MediumError::UnknownConnection(key))?;
        conn.queue.push_back(Outgoing::Fin);
        self.pump(key, sched)
    }

    fn pump(
        &mut self,
        key: ConnKey,
        sched: &mut impl Scheduler<MediumEvent>,
    ) -> Result<(), MediumError> {
        let Some(conn) = self.conns.get_mut(&key) else {
            return Ok(());
        };
        if conn.in_flight.is_some() || conn.state != ConnState::Established {
            return Ok(());
        }
        let Some(next) = conn.queue.pop_front() else {
            return Ok(());
        };
        let seq = conn.next_seq;
        conn.next_seq += 1;
        match next {
            Outgoing::Data(data) => self.send_tracked(key, flags::PSH, seq, data, sched),
            Outgoing::Fin => {
                conn.state = ConnState::Closing;
                self.send_tracked(key, flags::FIN, seq, Vec::new(), sched)
            }
        }
    }

    fn segment_frame(
        &self,
        key: ConnKey,
        fl: u8,
        seq: u32,
        ack: u32,
        data: &[u8],
    ) -> Result<RadioFrame, MediumError> {
        let o = self.config.overheads;
        let mut buf = Vec::with_capacity(o.stream_bytes + data.len());
        SegmentHeader {
            src_port: key.local_port,
            dst_port: key.peer_port,
            seq,
            ack,
            flags: fl,
        }
        .write(o.stream_bytes, &mut buf);
        buf.extend_from_slice(data);
        RadioFrame::new(key.node, Dest::Node(key.peer), buf, &o)
    }

    /// Sends a segment that expects an acknowledgment and arms its timer.
    fn send_tracked(
        &mut self,
        key: ConnKey,
        fl: u8,
        seq: u32,
        data: Vec<u8>,
        sched: &mut impl Scheduler<MediumEvent>,
    ) -> Result<(), MediumError> {
        let frame = self.segment_frame(key, fl, seq, 0, &data)?;
        self.send_frame(frame, sched)?;
        let timer = sched.schedule_in(
            self.config.stream.retransmit_timeout,
            key.node,
            MediumEvent::StreamTimer { conn: key, seq },
        );
        let conn = self
            .conns
            .get_mut(&key)
            .expect("tracked segment on live connection");
        if let Some(old) = conn.in_flight.take() {
            sched.cancel(old.timer);
        }
        conn.in_flight = Some(InFlight {
            seq,
            flags: fl,
            data,
            retries: 0,
            timer,
        });
        Ok(())
    }

    fn send_control(
        &mut self,
        key: ConnKey,
        fl: u8,
        ack: u32,
        sched: &mut impl Scheduler<MediumEvent>,
    ) {
        let frame = self
            .segment_frame(key, fl, 0, ack, &[])
            .expect("header-only segment fits the MTU");
        self.send_frame(frame, sched)
            .expect("header-only segment fits the MTU");
    }

    fn clear_in_flight(
        &mut self,
        key: ConnKey,
        sched: &mut impl Scheduler<MediumEvent>,
    ) -> Option<InFlight> {
        let f = self.conns.get_mut(&key)?.in_flight.take()?;
        sched.cancel(f.timer);
        Some(f)
    }

    pub(super) fn stream_timeout(
        &mut self,
        key: ConnKey,
        seq: u32,
        sched: &mut impl Scheduler<MediumEvent>,
    ) -> Vec<Indication> {
        let max_retries = self.config.stream.max_retries;
        let timeout = self.config.stream.retransmit_timeout;
        let Some(conn) = self.conns.get_mut(&key) else {
            return Vec::new();
        };
        let Some(f) = conn.in_flight.as_mut().filter(|f| f.seq == seq) else {
            return Vec::new();
        };
        if f.retries < max_retries {
            f.retries += 1;
            let (fl, data) = (f.flags, f.data.clone());
            f.timer = sched.schedule_in(
                timeout,
                key.node,
                MediumEvent::StreamTimer { conn: key, seq },
            );
            let frame = self
                .segment_frame(key, fl, seq, 0, &data)
                .expect("fit when first sent");
            self.send_frame(frame, sched).expect("fit when first sent");
            return Vec::new();
        }
        let was_fin = f.flags & flags::FIN != 0;
        self.conns.remove(&key);
        let event = if was_fin {
            StreamEvent::Closed
        } else {
            StreamEvent::Failed
        };
        vec![Indication::Stream { conn: key, event }]
    }

    pub(super) fn on_segment(
        &mut self,
        node: NodeId,
        from: NodeId,
        h: SegmentHeader,
        data: Vec<u8>,
        sched: &mut impl Scheduler<MediumEvent>,
    ) -> Vec<Indication> {
        let key = ConnKey {
            node,
            local_port: h.dst_port,
            peer: from,
            peer_port: h.src_port,
        };
        let mut out = Vec::new();
        let state = self.conns.get(&key).map(|c| c.state);
        let syn = h.flags & flags::SYN != 0;
        let ack = h.flags & flags::ACK != 0;

        if syn && !ack {
            match state {
                Some(ConnState::SynReceived) => {
                    self.send_control(key, flags::SYN | flags::ACK, 0, sched)
                }
                None if self.listeners.contains(&(node, h.dst_port)) => {
                    self.conns.insert(key, Conn::new(ConnState::SynReceived));
                    let _ = self.send_tracked(key, flags::SYN | flags::ACK, 0, Vec::new(), sched);
                }
                _ => {}
            }
            return out;
        }
        if syn && ack {
            match state {
                Some(ConnState::SynSent) => {
                    self.clear_in_flight(key, sched);
                    self.conns.get_mut(&key).expect("present").state = ConnState::Established;
                    self.send_control(key, flags::ACK, 0, sched);
                    out.push(Indication::Stream {
                        conn: key,
                        event: StreamEvent::Connected,
                    });
                    let _ = self.pump(key, sched);
                }
                Some(_) => self.send_control(key, flags::ACK, 0, sched),
                None => {}
            }
            return out;
        }
        if h.flags & flags::FIN != 0 {
            self.send_control(key, flags::ACK, h.seq, sched);
            if let Some(conn) = self.conns.remove(&key) {
                if let Some(f) = conn.in_flight {
                    sched.cancel(f.timer);
                }
                out.push(Indication::Stream {
                    conn: key,
                    event: StreamEvent::Closed,
                });
            }
            return out;
        }

        // Data or a bare ACK; either completes a passive open.
        if state == Some(ConnState::SynReceived) && (h.flags & flags::PSH != 0 || h.ack == 0) {
            self.clear_in_flight(key, sched);
            self.conns.get_mut(&key).expect("present").state = ConnState::Established;
            out.push(Indication::Stream {
                conn: key,
                event: StreamEvent::Accepted,
            });
            let _ = self.pump(key, sched);
        }
        if h.flags & flags::PSH != 0 {
            let Some(conn) = self.conns.get_mut(&key) else {
                return out;
            };
            if h.seq == conn.expected {
                conn.expected += 1;
                out.push(Indication::Stream {
                    conn: key,
                    event: StreamEvent::Data(data),
                });
            }
            if h.seq < conn.expected {
                self.send_control(key, flags::ACK, h.seq, sched);
            }
            return out;
        }
        // Bare ACK for our outstanding segment.
        let acked = self
            .conns
            .get(&key)
            .and_then(|c| c.in_flight.as_ref())
            .is_some_and(|f| f.seq == h.ack && f.flags & flags::SYN == 0);
        if acked {
            let f = self.clear_in_flight(key, sched).expect("checked");
            if f.flags & flags::FIN != 0 {
                self.conns.remove(&key);
                out.push(Indication::Stream {
                    conn: key,
                    event: StreamEvent::Closed,
                });
            } else {
                let _ = self.pump(key, sched);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use crate::engine::{Engine, TickTime};

    const CLIENT: NodeId = NodeId(0);
    const SERVER: NodeId = NodeId(1);

    fn net() -> Network {
        let mut n = Network::new(
            MediumConfig {
                overheads: Overheads::default(),
                link: LinkModel {
                    range_m: 50.0,
                    tx_success: 1.0,
                    rx_success: 1.0,
                    positions: vec![(0.0, 0.0), (10.0, 0.0)],
                },
                stream: StreamParams::default(),
            },
            &[RadioMode::AlwaysOn; 2],
        );
        n.record_frames();
        n.stream_listen(SERVER, 80);
        n
    }

    fn run(net: &mut Network, eng: &mut Engine<MediumEvent>, span: TickTime) -> Vec<Indication> {
        let until = eng.clock() + span;
        let mut out = Vec::new();
        eng.run(until, |e, ev| {
            out.extend(net.handle(ev.target, ev.payload, e))
        });
        out
    }

    fn kinds(net: &Network) -> Vec<SegmentKind> {
        let o = net.config().overheads;
        net.frame_log()
            .iter()
            .map(|r| r.segment_kind(&o).unwrap())
            .collect()
    }

    #[test]
    fn handshake_is_three_frames() {
        let mut n = net();
        let mut eng = Engine::new(0);
        let c = n.stream_connect(CLIENT, SERVER, 80, &mut eng).unwrap();
        let ind = run(&mut n, &mut eng, TickTime::from_secs(2));
        assert_eq!(
            kinds(&n),
            vec![SegmentKind::Syn, SegmentKind::SynAck, SegmentKind::Ack]
        );
        assert_eq!(n.stream_state(c), ConnState::Established);
        assert!(ind.contains(&Indication::Stream {
            conn: c,
            event: StreamEvent::Connected
        }));
        assert!(ind.iter().any(|i| matches!(i, Indication::Stream { event: StreamEvent::Accepted, conn } if conn.node == SERVER)));
        for r in n.frame_log() {
            assert_eq!(r.frame.length_bytes, 50, "header-only control frames");
        }
    }

    fn connect(n: &mut Network, eng: &mut Engine<MediumEvent>) -> ConnKey {
        let c = n.stream_connect(CLIENT, SERVER, 80, eng).unwrap();
        run(n, eng, TickTime::from_secs(1));
        c
    }

    #[test]
    fn one_message_is_one_data_and_one_ack() {
        let mut n = net();
        let mut eng = Engine::new(0);
        let c = connect(&mut n, &mut eng);
        let before = n.frame_log().len();
        n.stream_send(c, &[1; 8], &mut eng).unwrap();
        let ind = run(&mut n, &mut eng, TickTime::from_secs(2));
        assert_eq!(kinds(&n)[before..], [SegmentKind::Data, SegmentKind::Ack]);
        assert!(ind.iter().any(
            |i| matches!(i, Indication::Stream { event: StreamEvent::Data(d), .. } if d == &[1; 8])
        ));
    }

    #[test]
    fn lost_data_segment_is_retransmitted_once() {
        let mut n = net();
        let mut eng = Engine::new(0);
        // client frames: SYN, ACK, then the data segment (3rd)
        n.force_loss(CLIENT, 3);
        let c = connect(&mut n, &mut eng);
        let sent_at = eng.clock();
        n.stream_send(c, b"payload!", &mut eng).unwrap();
        let ind = run(&mut n, &mut eng, TickTime::from_secs(3));
        let tail = &kinds(&n)[3..];
        assert_eq!(
            tail,
            [SegmentKind::Data, SegmentKind::Data, SegmentKind::Ack]
        );
        let retx = &n.frame_log()[4];
        assert_eq!(retx.at, sent_at + TickTime::from_secs_f64(0.5));
        let data: Vec<_> = ind
            .iter()
            .filter(|i| {
                matches!(
                    i,
                    Indication::Stream {
                        event: StreamEvent::Data(_),
                        ..
                    }
                )
            })
            .collect();
        assert_eq!(data.len(), 1);
    }

    #[test]
    fn retry_exhaustion_fails_connection() {
        let mut n = net();
        let mut eng = Engine::new(0);
        for k in 1..=4 {
            n.force_loss(CLIENT, k);
        }
        let c = n.stream_connect(CLIENT, SERVER, 80, &mut eng).unwrap();
        let ind = run(&mut n, &mut eng, TickTime::from_secs(5));
        assert_eq!(
            ind,
            vec![Indication::Stream {
                conn: c,
                event: StreamEvent::Failed
            }]
        );
        assert_eq!(n.stats(CLIENT).frames_sent, 4);
    }

    #[test]
    fn send_requires_established() {
        let mut n = net();
        let mut eng = Engine::new(0);
        let c = n.stream_connect(CLIENT, SERVER, 80, &mut eng).unwrap();
        assert_eq!(
            n.stream_send(c, b"x", &mut eng),
            Err(MediumError::NotEstablished(c, ConnState::SynSent))
        );
    }

    #[test]
    fn close_is_fin_and_ack() {
        let mut n = net();
        let mut eng = Engine::new(0);
        let c = connect(&mut n, &mut eng);
        n.stream_close(c, &mut eng).unwrap();
        let ind = run(&mut n, &mut eng, TickTime::from_secs(1));
        assert_eq!(kinds(&n)[3..], [SegmentKind::Fin, SegmentKind::Ack]);
        assert_eq!(n.stream_state(c), ConnState::Closed);
        let closed = ind
            .iter()
            .filter(|i| {
                matches!(
                    i,
                    Indication::Stream {
                        event: StreamEvent::Closed,
                        ..
                    }
                )
            })
            .count();
        assert_eq!(closed, 2, "both ends observe the close");
    }

    #[test]
    fn large_writes_arrive_in_order_exactly_once() {
        let mut n = net();
        let mut eng = Engine::new(0);
        // drop a few scattered client frames; retransmission must hide them
        for k in [4, 7, 8] {
            n.force_loss(CLIENT, k);
        }
        let c = connect(&mut n, &mut eng);
        let msg: Vec<u8> = (0..400u32).map(|i| i as u8).collect();
        n.stream_send(c, &msg, &mut eng).unwrap();
        let ind = run(&mut n, &mut eng, TickTime::from_secs(20));
        let got: Vec<u8> = ind
            .into_iter()
            .filter_map(|i| match i {
                Indication::Stream {
                    event: StreamEvent::Data(d),
                    conn,
                } if conn.node == SERVER => Some(d),
                _ => None,
            })
            .flatten()
            .collect();
        assert_eq!(got, msg);
    }
}
