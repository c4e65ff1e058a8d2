//! Deterministic discrete-event core.
//!
//! Time is counted in RTimer ticks (32768 per second). Events fire in
//! `(fire_at, seq)` order, so simultaneous events dispatch in the order they
//! were scheduled. All randomness in a run is drawn from the engine's seeded
//! generator.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;
use std::ops::{Add, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// RTimer ticks per second on the modeled platform.
pub const RTIMER_HZ: u64 = 32_768;

/// A point in simulated time, or a span of it, in RTimer ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct TickTime(pub u64);

impl TickTime {
    pub const ZERO: TickTime = TickTime(0);

    pub fn from_secs(secs: u64) -> Self {
        TickTime(secs * RTIMER_HZ)
    }

    /// Converts fractional seconds to ticks, rounding any sub-tick remainder up.
    pub fn from_secs_f64(secs: f64) -> Self {
        assert!(
            secs >= 0.0 && secs.is_finite(),
            "negative or non-finite duration"
        );
        TickTime((secs * RTIMER_HZ as f64).ceil() as u64)
    }

    pub fn ticks(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / RTIMER_HZ as f64
    }

    pub fn saturating_sub(self, other: TickTime) -> TickTime {
        TickTime(self.0.saturating_sub(other.0))
    }
}

impl Add for TickTime {
    type Output = TickTime;
    fn add(self, rhs: TickTime) -> TickTime {
        TickTime(self.0 + rhs.0)
    }
}

impl Sub for TickTime {
    type Output = TickTime;
    fn sub(self, rhs: TickTime) -> TickTime {
        TickTime(self.0 - rhs.0)
    }
}

impl fmt::Display for TickTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}t", self.0)
    }
}

/// Identifies a simulated node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u16);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node{}", self.0)
    }
}

/// Handle returned by [`Engine::schedule`], usable for cancellation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventId(pub u64);

#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent<P> {
    pub fire_at: TickTime,
    pub target: NodeId,
    pub payload: P,
    pub seq: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EngineError {
    #[error("event scheduled at {at} but the clock is already at {now}")]
    InThePast { at: TickTime, now: TickTime },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSummary {
    pub dispatched: u64,
    pub clock: TickTime,
}

/// The scheduling surface handed to components while they react to an event.
pub trait Scheduler<E> {
    fn now(&self) -> TickTime;
    fn schedule_at(
        &mut self,
        at: TickTime,
        target: NodeId,
        payload: E,
    ) -> Result<EventId, EngineError>;
    fn cancel(&mut self, id: EventId) -> bool;
    /// Uniform draw in `[0, 1)` from the run's generator.
    fn uniform(&mut self) -> f64;

    fn schedule_in(&mut self, delay: TickTime, target: NodeId, payload: E) -> EventId {
        let at = self.now() + delay;
        self.schedule_at(at, target, payload)
            .expect("a non-negative delay is never in the past")
    }
}

pub struct Engine<P> {
    clock: TickTime,
    next_seq: u64,
    queue: BinaryHeap<Reverse<(TickTime, u64)>>,
    pending: HashMap<u64, (NodeId, P)>,
    rng: ChaCha8Rng,
    dispatched: u64,
}

impl<P> Engine<P> {
    pub fn new(seed: u64) -> Self {
        Engine {
            clock: TickTime::ZERO,
            next_seq: 1,
            queue: BinaryHeap::new(),
            pending: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dispatched: 0,
        }
    }

    pub fn clock(&self) -> TickTime {
        self.clock
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    /// Earliest pending fire time, if any.
    pub fn peek_time(&mut self) -> Option<TickTime> {
        while let Some(Reverse((at, seq))) = self.queue.peek().copied() {
            if self.pending.contains_key(&seq) {
                return Some(at);
            }
            self.queue.pop();
        }
        None
    }

    pub fn schedule(
        &mut self,
        at: TickTime,
        target: NodeId,
        payload: P,
    ) -> Result<EventId, EngineError> {
        if at < self.clock {
            return Err(EngineError::InThePast {
                at,
                now: self.clock,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse((at, seq)));
        self.pending.insert(seq, (target, payload));
        Ok(EventId(seq))
    }

    pub fn cancel(&mut self, id: EventId) -> bool {
        self.pending.remove(&id.0).is_some()
    }

    /// Pops the next event firing at or before `until`, advancing the clock to it.
    pub fn next_event(&mut self, until: TickTime) -> Option<SimEvent<P>> {
        loop {
            let Reverse((at, seq)) = *self.queue.peek()?;
            if at > until {
                return None;
            }
            self.queue.pop();
            if let Some((target, payload)) = self.pending.remove(&seq) {
                self.clock = at;
                self.dispatched += 1;
                return Some(SimEvent {
                    fire_at: at,
                    target,
                    payload,
                    seq,
                });
            }
        }
    }

    /// Dispatches every event with `fire_at <= until`, then sets the clock to `until`.
    pub fn run<F>(&mut self, until: TickTime, mut handler: F) -> RunSummary
    where
        F: FnMut(&mut Engine<P>, SimEvent<P>),
    {
        assert!(
            until >= self.clock,
            "run horizon {until} is behind the clock {}",
            self.clock
        );
        let start = self.dispatched;
        while let Some(ev) = self.next_event(until) {
            handler(self, ev);
        }
        self.clock = until;
        RunSummary {
            dispatched: self.dispatched - start,
            clock: self.clock,
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

impl<P> Scheduler<P> for Engine<P> {
    fn now(&self) -> TickTime {
        self.clock
    }

    fn schedule_at(
        &mut self,
        at: TickTime,
        target: NodeId,
        payload: P,
    ) -> Result<EventId, EngineError> {
        self.schedule(at, target, payload)
    }

    fn cancel(&mut self, id: EventId) -> bool {
        Engine::cancel(self, id)
    }

    fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }
}

/// Adapts an engine over a wider event type into a scheduler for one
/// component's narrower event type.
pub struct Mapped<'a, P, E> {
    engine: &'a mut Engine<P>,
    wrap: fn(E) -> P,
}

impl<'a, P, E> Mapped<'a, P, E> {
    pub fn new(engine: &'a mut Engine<P>, wrap: fn(E) -> P) -> Self {
        Mapped { engine, wrap }
    }
}

impl<P, E> Scheduler<E> for Mapped<'_, P, E> {
    fn now(&self) -> TickTime {
        self.engine.clock
    }

    fn schedule_at(
        &mut self,
        at: TickTime,
        target: NodeId,
        payload: E,
    ) -> Result<EventId, EngineError> {
        self.engine.schedule(at, target, (self.wrap)(payload))
    }

    fn cancel(&mut self, id: EventId) -> bool {
        self.engine.cancel(id)
    }

    fn uniform(&mut self) -> f64 {
        self.engine.uniform()
    }
}
