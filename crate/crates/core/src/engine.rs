//! Discrete-event core: a simulated clock and an event queue ordered by
//! `(fire_at, seq)`.
//!
//! Events scheduled for the same instant are delivered in insertion order,
//! which makes every run a pure function of its inputs.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fmt;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulated time in seconds. Never NaN, never negative.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct SimTime(f64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0.0);

    /// Panics on NaN or negative input; use `try_from` for untrusted values.
    pub fn from_secs(secs: f64) -> SimTime {
        SimTime::try_from(secs).expect("invalid simulation time")
    }

    pub fn secs(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for SimTime {
    type Error = EngineError;

    fn try_from(secs: f64) -> Result<Self, Self::Error> {
        if secs.is_nan() || secs < 0.0 {
            Err(EngineError::InvalidTime(secs))
        } else {
            Ok(SimTime(secs))
        }
    }
}

impl From<SimTime> for f64 {
    fn from(t: SimTime) -> f64 {
        t.0
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

    fn add(self, delay: f64) -> SimTime {
        SimTime::from_secs(self.0 + delay)
    }
}

impl Sub for SimTime {
    type Output = f64;

    fn sub(self, rhs: SimTime) -> f64 {
        self.0 - rhs.0
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}s", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("event scheduled at {at} but the clock is already at {now}")]
    ScheduleInPast { at: SimTime, now: SimTime },
    #[error("run_until({end}) called with the clock already at {now}")]
    EndBeforeNow { end: SimTime, now: SimTime },
    #[error("invalid simulation time {0}")]
    InvalidTime(f64),
}

/// A delivered event.
#[derive(Debug, Clone, PartialEq)]
pub struct Event<P> {
    pub fire_at: SimTime,
    pub seq: u64,
    pub payload: P,
}

/// Event queue plus clock. The payload type is chosen by the model.
pub struct Engine<P> {
    now: SimTime,
    next_seq: u64,
    delivered: u64,
    // keys only; payloads sit in `slots` so heap sifts stay cheap
    queue: BinaryHeap<Reverse<(SimTime, u64, u32)>>,
    slots: Vec<Option<P>>,
    free: Vec<u32>,
}

impl<P> Default for Engine<P> {
    fn default() -> Self {
        Engine::new()
    }
}

impl<P> Engine<P> {
    pub fn new() -> Self {
        Engine {
            now: SimTime::ZERO,
            next_seq: 0,
            delivered: 0,
            queue: BinaryHeap::new(),
            slots: Vec::new(),
            free: Vec::new(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Number of events still waiting.
    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    /// Number of events handed out so far.
    pub fn delivered(&self) -> u64 {
        self.delivered
    }

    /// Enqueue `payload` to fire at `at`. Returns the sequence number
    /// assigned to the event.
    pub fn schedule(&mut self, at: SimTime, payload: P) -> Result<u64, EngineError> {
        if at < self.now {
            return Err(EngineError::ScheduleInPast { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        let slot = match self.free.pop() {
            Some(i) => {
                self.slots[i as usize] = Some(payload);
                i
            }
            None => {
                self.slots.push(Some(payload));
                (self.slots.len() - 1) as u32
            }
        };
        self.queue.push(Reverse((at, seq, slot)));
        Ok(seq)
    }

    /// Enqueue relative to the current clock.
    pub fn schedule_in(&mut self, delay: f64, payload: P) -> Result<u64, EngineError> {
        let at = SimTime::try_from(self.now.secs() + delay)?;
        self.schedule(at, payload)
    }

    /// Pop the next event if it fires at or before `t_end`, advancing the
    /// clock to its firing time.
    pub fn pop_until(&mut self, t_end: SimTime) -> Option<Event<P>> {
        let due = matches!(self.queue.peek(), Some(Reverse((at, _, _))) if *at <= t_end);
        if !due {
            return None;
        }
        let Reverse((fire_at, seq, slot)) = self.queue.pop()?;
        debug_assert!(fire_at >= self.now);
        let payload = self.slots[slot as usize].take().expect("queued slot holds a payload");
        self.free.push(slot);
        self.now = fire_at;
        self.delivered += 1;
        Some(Event {
            fire_at,
            seq,
            payload,
        })
    }

    /// Move the clock forward to `t` without delivering anything. Fails if
    /// an undelivered event is due before `t` or `t` is in the past.
    pub fn advance_to(&mut self, t: SimTime) -> Result<(), EngineError> {
        if t < self.now {
            return Err(EngineError::EndBeforeNow { end: t, now: self.now });
        }
        if let Some(Reverse((at, _, _))) = self.queue.peek() {
            debug_assert!(*at > t, "advance_to skipped a due event");
        }
        self.now = t;
        Ok(())
    }

    /// Deliver every event with `fire_at <= t_end` in `(fire_at, seq)` order,
    /// including events scheduled by the handler itself, then set the clock
    /// to `t_end`.
    pub fn run_until<F>(&mut self, t_end: SimTime, mut handler: F) -> Result<(), EngineError>
    where
        F: FnMut(&mut Engine<P>, Event<P>),
    {
        if t_end < self.now {
            return Err(EngineError::EndBeforeNow { end: t_end, now: self.now });
        }
        while let Some(ev) = self.pop_until(t_end) {
            handler(self, ev);
        }
        self.now = t_end;
        Ok(())
    }
}
