//! Deterministic discrete-event kernel.
//!
//! Time is a non-negative `f64` number of seconds. Events that fire at the
//! same instant are dequeued in insertion order, so a run is fully determined
//! by its configuration and seed.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::ops::{Add, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A point on the simulated clock, in seconds.
#[derive(Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimTime(f64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0.0);

    /// Panics on negative or non-finite input.
    pub fn from_secs(secs: f64) -> Self {
        assert!(
            secs.is_finite() && secs >= 0.0,
            "simulation time must be finite and non-negative, got {secs}"
        );
        SimTime(secs)
    }

    pub fn secs(self) -> f64 {
        self.0
    }

    /// Seconds elapsed since `earlier`, clamped at zero.
    pub fn since(self, earlier: SimTime) -> f64 {
        (self.0 - earlier.0).max(0.0)
    }
}

impl Eq for SimTime {}

impl PartialOrd for SimTime {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SimTime {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl Add<f64> for SimTime {
    type Output = SimTime;

    fn add(self, rhs: f64) -> SimTime {
        SimTime::from_secs(self.0 + rhs)
    }
}

impl Sub for SimTime {
    type Output = f64;

    fn sub(self, rhs: SimTime) -> f64 {
        self.0 - rhs.0
    }
}

impl fmt::Debug for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}s", self.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.9}", self.0)
    }
}

/// An entry in the event queue.
#[derive(Debug, Clone)]
pub struct Event<E> {
    pub fire_time: SimTime,
    /// Insertion counter; breaks ties between equal fire times.
    pub sequence_tag: u64,
    pub payload: E,
}

impl<E> PartialEq for Event<E> {
    fn eq(&self, other: &Self) -> bool {
        self.sequence_tag == other.sequence_tag
    }
}

impl<E> Eq for Event<E> {}

impl<E> PartialOrd for Event<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Event<E> {
    // Reversed so that `BinaryHeap` pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .fire_time
            .cmp(&self.fire_time)
            .then_with(|| other.sequence_tag.cmp(&self.sequence_tag))
    }
}

/// Virtual clock plus priority queue of pending events.
#[derive(Debug)]
pub struct Scheduler<E> {
    now: SimTime,
    next_tag: u64,
    fired: u64,
    queue: BinaryHeap<Event<E>>,
}

impl<E> Default for Scheduler<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> Scheduler<E> {
    pub fn new() -> Self {
        Scheduler {
            now: SimTime::ZERO,
            next_tag: 0,
            fired: 0,
            queue: BinaryHeap::new(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Number of events dequeued so far.
    pub fn fired(&self) -> u64 {
        self.fired
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    /// Enqueue `payload` to fire at `at`.
    ///
    /// Scheduling into the past is a logic error and panics.
    pub fn schedule(&mut self, at: SimTime, payload: E) -> u64 {
        assert!(
            at >= self.now,
            "event scheduled into the past: fire_time {:?} < clock {:?}",
            at,
            self.now
        );
        let tag = self.next_tag;
        self.next_tag += 1;
        self.queue.push(Event {
            fire_time: at,
            sequence_tag: tag,
            payload,
        });
        tag
    }

    /// Enqueue `payload` to fire `delay` seconds from now.
    pub fn schedule_in(&mut self, delay: f64, payload: E) -> u64 {
        let at = self.now + delay;
        self.schedule(at, payload)
    }

    /// Pop the next event if it fires no later than `end`, advancing the clock.
    pub fn pop_until(&mut self, end: SimTime) -> Option<Event<E>> {
        match self.queue.peek() {
            Some(ev) if ev.fire_time <= end => {
                let ev = self.queue.pop().expect("peeked event");
                self.now = ev.fire_time;
                self.fired += 1;
                Some(ev)
            }
            _ => None,
        }
    }

    /// Move the clock forward to `end` without firing anything.
    pub fn advance_to(&mut self, end: SimTime) {
        if end > self.now {
            self.now = end;
        }
    }

    /// Process every event with `fire_time <= end`, then leave the clock at `end`.
    pub fn run_until<F, Err>(&mut self, end: SimTime, mut handler: F) -> Result<(), Err>
    where
        F: FnMut(&mut Self, Event<E>) -> Result<(), Err>,
    {
        while let Some(ev) = self.pop_until(end) {
            handler(self, ev)?;
        }
        self.advance_to(end);
        Ok(())
    }
}

/// Which stochastic component a random stream belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Component {
    Lleg,
    Marking,
    Arrivals,
    Bsm,
}

/// Identifier of an independent random stream: a component kind plus an index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub component: Component,
    pub index: u32,
}

impl StreamId {
    pub fn new(component: Component, index: u32) -> Self {
        StreamId { component, index }
    }

    fn as_u64(self) -> u64 {
        let kind = match self.component {
            Component::Lleg => 1u64,
            Component::Marking => 2,
            Component::Arrivals => 3,
            Component::Bsm => 4,
        };
        (kind << 32) | u64::from(self.index)
    }
}

/// A seeded pseudo-random stream.
///
/// Each `(seed, stream_id)` pair selects a distinct ChaCha8 stream, so draws
/// on one stream never shift the sequence seen by another.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    id: StreamId,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, id: StreamId) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id.as_u64());
        RngStream { seed, id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn id(&self) -> StreamId {
        self.id
    }

    /// Uniform draw on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Uniform draw on `(0, 1]`.
    pub fn uniform_open_low(&mut self) -> f64 {
        1.0 - self.uniform()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        if p <= 0.0 {
            false
        } else if p >= 1.0 {
            true
        } else {
            self.uniform() < p
        }
    }

    /// Exponential inter-arrival time with the given rate (per second).
    pub fn exponential(&mut self, rate: f64) -> f64 {
        -self.uniform_open_low().ln() / rate
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: u32) -> u32 {
        self.rng.gen_range(0..n)
    }
}
