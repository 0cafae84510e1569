//! Deterministic discrete-event engine.
//!
//! Time is kept in integer nanoseconds. Events are totally ordered by
//! `(fire_time, seq)` where `seq` is assigned when the event is scheduled, so
//! simultaneous events fire in scheduling order. Randomness is drawn from
//! named streams whose seeds are derived from the master seed and the stream
//! name, so adding a consumer never perturbs the draws seen by the others.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::ops::{Add, AddAssign, Mul, Sub};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// An instant on the simulation clock, in nanoseconds since start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimTime(u64);

/// A span of simulated time, in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimDuration(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_ns(ns: u64) -> Self {
        SimTime(ns)
    }

    pub const fn from_us(us: u64) -> Self {
        SimTime(us * 1_000)
    }

    pub const fn from_ms(ms: u64) -> Self {
        SimTime(ms * 1_000_000)
    }

    pub const fn as_ns(self) -> u64 {
        self.0
    }

    pub fn as_us_f64(self) -> f64 {
        self.0 as f64 / 1e3
    }

    /// Elapsed time since `earlier`, or `None` if `earlier` is in the future.
    pub fn checked_since(self, earlier: SimTime) -> Option<SimDuration> {
        self.0.checked_sub(earlier.0).map(SimDuration)
    }

    /// Elapsed time since `earlier`, clamped at zero.
    pub fn saturating_since(self, earlier: SimTime) -> SimDuration {
        SimDuration(self.0.saturating_sub(earlier.0))
    }
}

impl SimDuration {
    pub const ZERO: SimDuration = SimDuration(0);

    pub const fn from_ns(ns: u64) -> Self {
        SimDuration(ns)
    }

    pub const fn from_us(us: u64) -> Self {
        SimDuration(us * 1_000)
    }

    pub const fn from_ms(ms: u64) -> Self {
        SimDuration(ms * 1_000_000)
    }

    pub const fn from_secs(s: u64) -> Self {
        SimDuration(s * 1_000_000_000)
    }

    /// Converts a microsecond quantity read from a config file. Fails unless
    /// the value is non-negative, finite and lands on a whole nanosecond.
    pub fn try_from_us_f64(us: f64) -> Result<Self, TimeConversionError> {
        if !us.is_finite() || us < 0.0 {
            return Err(TimeConversionError(us));
        }
        let ns = us * 1e3;
        let rounded = ns.round();
        if (ns - rounded).abs() > 1e-6 * rounded.max(1.0) || rounded > u64::MAX as f64 {
            return Err(TimeConversionError(us));
        }
        Ok(SimDuration(rounded as u64))
    }

    pub const fn as_ns(self) -> u64 {
        self.0
    }

    pub fn as_us_f64(self) -> f64 {
        self.0 as f64 / 1e3
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("{0} us is not a non-negative whole number of nanoseconds")]
pub struct TimeConversionError(pub f64);

impl Add<SimDuration> for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimDuration) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign<SimDuration> for SimTime {
    fn add_assign(&mut self, rhs: SimDuration) {
        self.0 += rhs.0;
    }
}

impl Sub for SimTime {
    type Output = SimDuration;
    /// Panics if `rhs` is later than `self`; use `checked_since` where that
    /// can legitimately happen.
    fn sub(self, rhs: SimTime) -> SimDuration {
        SimDuration(
            self.0
                .checked_sub(rhs.0)
                .expect("negative simulated time difference"),
        )
    }
}

impl Add for SimDuration {
    type Output = SimDuration;
    fn add(self, rhs: SimDuration) -> SimDuration {
        SimDuration(self.0 + rhs.0)
    }
}

impl AddAssign for SimDuration {
    fn add_assign(&mut self, rhs: SimDuration) {
        self.0 += rhs.0;
    }
}

impl Sub for SimDuration {
    type Output = SimDuration;
    fn sub(self, rhs: SimDuration) -> SimDuration {
        SimDuration(self.0.checked_sub(rhs.0).expect("negative simulated duration"))
    }
}

impl Mul<u64> for SimDuration {
    type Output = SimDuration;
    fn mul(self, rhs: u64) -> SimDuration {
        SimDuration(self.0 * rhs)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.0)
    }
}

impl fmt::Display for SimDuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.0)
    }
}

/// Serde adapter: a [`SimDuration`] written as (possibly fractional)
/// microseconds in config files.
pub mod serde_us {
    use super::SimDuration;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &SimDuration, s: S) -> Result<S::Ok, S::Error> {
        let ns = d.as_ns();
        if ns.is_multiple_of(1_000) {
            s.serialize_u64(ns / 1_000)
        } else {
            s.serialize_f64(d.as_us_f64())
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<SimDuration, D::Error> {
        let us = f64::deserialize(d)?;
        SimDuration::try_from_us_f64(us).map_err(D::Error::custom)
    }

    /// Same as the parent module for `Option<SimDuration>`.
    pub mod option {
        use super::super::SimDuration;
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(d: &Option<SimDuration>, s: S) -> Result<S::Ok, S::Error> {
            match d {
                Some(d) => super::serialize(d, s),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<SimDuration>, D::Error> {
            #[derive(Deserialize)]
            struct Wrap(#[serde(with = "super")] SimDuration);
            Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
        }
    }
}

/// Implemented by event payloads so the dispatch log can name them.
pub trait EventTag {
    fn tag(&self) -> &'static str;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event<P> {
    pub fire_time: SimTime,
    pub seq: u64,
    pub target: &'static str,
    pub payload: P,
}

/// Handle returned by [`Scheduler::schedule`]; used for cancellation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventHandle {
    fire_time: SimTime,
    seq: u64,
}

/// One line of the optional dispatch log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DispatchRecord {
    pub fire_time_ns: u64,
    pub target: &'static str,
    pub tag: &'static str,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    pub dispatched: u64,
    pub pending: usize,
    pub clock: SimTime,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("cannot schedule at {at} from {now}: time is in the past")]
    ScheduleInPast { now: SimTime, at: SimTime },
    #[error("run_until({t_end}) called with clock already at {now}")]
    RunEndInPast { now: SimTime, t_end: SimTime },
    #[error("handler failed on event #{position} ({tag} -> {target} at {time}): {message}")]
    Handler {
        position: u64,
        time: SimTime,
        target: &'static str,
        tag: &'static str,
        message: String,
    },
}

struct Queued<P> {
    key: (SimTime, u64),
    target: &'static str,
    payload: P,
}

impl<P> PartialEq for Queued<P> {
    fn eq(&self, other: &Self) -> bool {
        self.key == other.key
    }
}

impl<P> Eq for Queued<P> {}

impl<P> PartialOrd for Queued<P> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Queued<P> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key.cmp(&other.key)
    }
}

/// Single-threaded event queue and clock.
pub struct Scheduler<P> {
    now: SimTime,
    next_seq: u64,
    heap: BinaryHeap<Reverse<Queued<P>>>,
    // Keys at or below this have already left the heap.
    last_popped: Option<(SimTime, u64)>,
    cancelled: HashSet<u64>,
    dispatched: u64,
    log: Option<Vec<DispatchRecord>>,
}

impl<P: EventTag> Default for Scheduler<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P: EventTag> Scheduler<P> {
    pub fn new() -> Self {
        Scheduler {
            now: SimTime::ZERO,
            next_seq: 0,
            heap: BinaryHeap::new(),
            last_popped: None,
            cancelled: HashSet::new(),
            dispatched: 0,
            log: None,
        }
    }

    /// Enables the per-event dispatch log.
    pub fn with_dispatch_log(mut self) -> Self {
        self.log = Some(Vec::new());
        self
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.heap.len() - self.cancelled.len()
    }

    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    pub fn dispatch_log(&self) -> Option<&[DispatchRecord]> {
        self.log.as_deref()
    }

    pub fn take_dispatch_log(&mut self) -> Option<Vec<DispatchRecord>> {
        self.log.take()
    }

    pub fn schedule(
        &mut self,
        at: SimTime,
        target: &'static str,
        payload: P,
    ) -> Result<EventHandle, SimError> {
        if at < self.now {
            return Err(SimError::ScheduleInPast { now: self.now, at });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(Queued {
            key: (at, seq),
            target,
            payload,
        }));
        Ok(EventHandle { fire_time: at, seq })
    }

    pub fn schedule_in(
        &mut self,
        delay: SimDuration,
        target: &'static str,
        payload: P,
    ) -> Result<EventHandle, SimError> {
        self.schedule(self.now + delay, target, payload)
    }

    /// Returns true iff the event had not fired yet and is now removed.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        let key = (handle.fire_time, handle.seq);
        if handle.seq >= self.next_seq {
            return false;
        }
        if let Some(last) = self.last_popped {
            if key <= last {
                return false;
            }
        }
        self.cancelled.insert(handle.seq)
    }

    fn pop_due(&mut self, t_end: SimTime) -> Option<Event<P>> {
        loop {
            let due = matches!(self.heap.peek(), Some(Reverse(q)) if q.key.0 <= t_end);
            if !due {
                return None;
            }
            let Reverse(q) = self.heap.pop()?;
            self.last_popped = Some(q.key);
            if !self.cancelled.is_empty() && self.cancelled.remove(&q.key.1) {
                continue;
            }
            return Some(Event {
                fire_time: q.key.0,
                seq: q.key.1,
                target: q.target,
                payload: q.payload,
            });
        }
    }

    /// Dispatches every event with `fire_time <= t_end` in order, then
    /// leaves the clock at `t_end`. A handler error aborts the run and
    /// reports the position of the offending event.
    pub fn run_until<F, E>(&mut self, t_end: SimTime, mut handler: F) -> Result<RunSummary, SimError>
    where
        F: FnMut(&mut Self, Event<P>) -> Result<(), E>,
        E: fmt::Display,
    {
        if t_end < self.now {
            return Err(SimError::RunEndInPast {
                now: self.now,
                t_end,
            });
        }
        while let Some(ev) = self.pop_due(t_end) {
            debug_assert!(ev.fire_time >= self.now);
            self.now = ev.fire_time;
            self.dispatched += 1;
            let (time, target, tag) = (ev.fire_time, ev.target, ev.payload.tag());
            if let Some(log) = self.log.as_mut() {
                log.push(DispatchRecord {
                    fire_time_ns: time.as_ns(),
                    target,
                    tag,
                });
            }
            if let Err(e) = handler(self, ev) {
                return Err(SimError::Handler {
                    position: self.dispatched,
                    time,
                    target,
                    tag,
                    message: e.to_string(),
                });
            }
        }
        self.now = t_end;
        Ok(RunSummary {
            dispatched: self.dispatched,
            pending: self.pending(),
            clock: self.now,
        })
    }
}

/// Derives the seed of a named stream from the master seed.
pub fn derive_seed(master_seed: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// A named, independently seeded random stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    name: String,
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(master_seed: u64, name: &str) -> Self {
        let seed = derive_seed(master_seed, name);
        RngStream {
            name: name.to_owned(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}
