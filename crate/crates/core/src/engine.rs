//! Deterministic discrete-event core.
//!
//! The engine owns a virtual clock in integer microseconds and a priority
//! queue of pending events ordered by `(fire_at, seq)`. Events scheduled for
//! the same instant are delivered in insertion order. Randomness comes from
//! named [`RngStream`]s whose state is derived only from the global seed and
//! the stream label, so adding a stream never perturbs another one.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::marker::PhantomData;
use std::ops::{Add, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Virtual time in microseconds since simulation start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000)
    }

    pub const fn from_secs(s: u64) -> Self {
        SimTime(s * 1_000_000)
    }

    /// Rounds to the nearest microsecond; negative inputs clamp to zero.
    pub fn from_secs_f64(s: f64) -> Self {
        if s <= 0.0 {
            SimTime(0)
        } else {
            SimTime((s * 1e6).round() as u64)
        }
    }

    pub const fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn as_millis_f64(self) -> f64 {
        self.0 as f64 / 1e3
    }

    pub fn saturating_sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}s", self.as_secs_f64())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EngineError {
    #[error("event scheduled in the past: fire_at {fire_at} < now {now}")]
    ScheduledInPast { fire_at: SimTime, now: SimTime },
    #[error("run_until target {target} is before the current clock {now}")]
    HorizonInPast { target: SimTime, now: SimTime },
    #[error("handler fault at {at} (event seq {seq}): {reason}")]
    HandlerFault {
        at: SimTime,
        seq: u64,
        reason: String,
    },
    #[error("empty range: lo {lo} > hi {hi}")]
    EmptyRange { lo: i64, hi: i64 },
}

/// Handle returned by [`Engine::schedule`]; permits cancellation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventHandle(u64);

impl EventHandle {
    pub fn seq(self) -> u64 {
        self.0
    }
}

/// A scheduled state transition.
#[derive(Debug, Clone)]
pub struct Event<E> {
    pub fire_at: SimTime,
    pub seq: u64,
    pub payload: E,
}

struct Entry<E>(Event<E>);

impl<E> Entry<E> {
    fn key(&self) -> (SimTime, u64) {
        (self.0.fire_at, self.0.seq)
    }
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl<E> Eq for Entry<E> {}
impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<E> Ord for Entry<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

/// Anything events can be scheduled on. Sub-components are written against
/// this trait with their own event type and are adapted with [`Mapped`].
pub trait Scheduler<E> {
    fn now(&self) -> SimTime;
    fn schedule(&mut self, fire_at: SimTime, payload: E) -> Result<EventHandle, EngineError>;
    fn cancel(&mut self, handle: EventHandle) -> bool;

    fn schedule_in(&mut self, delay: SimTime, payload: E) -> EventHandle {
        let at = self.now() + delay;
        self.schedule(at, payload)
            .expect("relative schedule is never in the past")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSummary {
    pub events_fired: u64,
    pub final_clock: SimTime,
}

pub struct Engine<E> {
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Reverse<Entry<E>>>,
    // seqs of scheduled events that have neither fired nor been cancelled
    live: HashSet<u64>,
    fired: u64,
}

impl<E> Default for Engine<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> Engine<E> {
    pub fn new() -> Self {
        Self {
            now: SimTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
            live: HashSet::new(),
            fired: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Number of pending, uncancelled events.
    pub fn pending(&self) -> usize {
        self.live.len()
    }

    pub fn events_fired(&self) -> u64 {
        self.fired
    }

    pub fn schedule(&mut self, fire_at: SimTime, payload: E) -> Result<EventHandle, EngineError> {
        if fire_at < self.now {
            return Err(EngineError::ScheduledInPast {
                fire_at,
                now: self.now,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.live.insert(seq);
        self.queue.push(Reverse(Entry(Event {
            fire_at,
            seq,
            payload,
        })));
        Ok(EventHandle(seq))
    }

    /// Returns `true` if the event was pending and is now cancelled.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        self.live.remove(&handle.0)
    }

    fn discard_cancelled_head(&mut self) {
        while let Some(Reverse(head)) = self.queue.peek() {
            if self.live.contains(&head.0.seq) {
                break;
            }
            self.queue.pop();
        }
    }

    /// Fire time of the next live event.
    pub fn peek_time(&mut self) -> Option<SimTime> {
        self.discard_cancelled_head();
        self.queue.peek().map(|Reverse(e)| e.0.fire_at)
    }

    /// Pops the next live event if it fires at or before `limit`, advancing the clock.
    pub fn pop_until(&mut self, limit: SimTime) -> Option<Event<E>> {
        self.discard_cancelled_head();
        match self.queue.peek() {
            Some(Reverse(e)) if e.0.fire_at <= limit => {}
            _ => return None,
        }
        let Reverse(Entry(ev)) = self.queue.pop()?;
        self.live.remove(&ev.seq);
        debug_assert!(ev.fire_at >= self.now);
        self.now = ev.fire_at;
        self.fired += 1;
        Some(ev)
    }

    /// Executes every event with `fire_at <= t_end` in `(fire_at, seq)` order.
    ///
    /// The handler receives the engine so it can schedule follow-up events.
    /// A handler error aborts the run and identifies the offending event.
    pub fn run_until<F>(
        &mut self,
        t_end: SimTime,
        mut handler: F,
    ) -> Result<RunSummary, EngineError>
    where
        F: FnMut(&mut Engine<E>, Event<E>) -> Result<(), String>,
    {
        if t_end < self.now {
            return Err(EngineError::HorizonInPast {
                target: t_end,
                now: self.now,
            });
        }
        let start = self.fired;
        while let Some(ev) = self.pop_until(t_end) {
            let (at, seq) = (ev.fire_at, ev.seq);
            handler(self, ev).map_err(|reason| EngineError::HandlerFault { at, seq, reason })?;
        }
        self.now = t_end;
        Ok(RunSummary {
            events_fired: self.fired - start,
            final_clock: self.now,
        })
    }
}

impl<E> Scheduler<E> for Engine<E> {
    fn now(&self) -> SimTime {
        self.now
    }
    fn schedule(&mut self, fire_at: SimTime, payload: E) -> Result<EventHandle, EngineError> {
        Engine::schedule(self, fire_at, payload)
    }
    fn cancel(&mut self, handle: EventHandle) -> bool {
        Engine::cancel(self, handle)
    }
}

/// Adapts a scheduler for event type `G` into one for `E` via a wrapping function.
pub struct Mapped<'a, S, F, G> {
    inner: &'a mut S,
    wrap: F,
    _marker: PhantomData<fn() -> G>,
}

impl<'a, S, F, G> Mapped<'a, S, F, G> {
    pub fn new(inner: &'a mut S, wrap: F) -> Self {
        Self {
            inner,
            wrap,
            _marker: PhantomData,
        }
    }
}

impl<'a, E, G, S, F> Scheduler<E> for Mapped<'a, S, F, G>
where
    S: Scheduler<G>,
    F: Fn(E) -> G,
{
    fn now(&self) -> SimTime {
        self.inner.now()
    }
    fn schedule(&mut self, fire_at: SimTime, payload: E) -> Result<EventHandle, EngineError> {
        self.inner.schedule(fire_at, (self.wrap)(payload))
    }
    fn cancel(&mut self, handle: EventHandle) -> bool {
        self.inner.cancel(handle)
    }
}

/// A named pseudo-random stream seeded from `(global_seed, label)`.
#[derive(Clone)]
pub struct RngStream {
    label: String,
    rng: ChaCha12Rng,
}

impl fmt::Debug for RngStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RngStream")
            .field("label", &self.label)
            .finish()
    }
}

impl RngStream {
    pub fn new(global_seed: u64, label: impl Into<String>) -> Self {
        let label = label.into();
        let mut hasher = Sha256::new();
        hasher.update(global_seed.to_le_bytes());
        hasher.update(label.as_bytes());
        let seed: [u8; 32] = hasher.finalize().into();
        Self {
            label,
            rng: ChaCha12Rng::from_seed(seed),
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Uniform integer in the closed range `[lo, hi]`.
    pub fn draw_uniform(&mut self, lo: i64, hi: i64) -> Result<i64, EngineError> {
        if lo > hi {
            return Err(EngineError::EmptyRange { lo, hi });
        }
        Ok(self.rng.gen_range(lo..=hi))
    }

    /// Uniform float in `[0, 1)`.
    pub fn draw_unit(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }
}
