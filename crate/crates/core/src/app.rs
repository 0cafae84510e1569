//! Application endpoints: the status sampler at the source, the WiFresh
//! poller at the destination and the receiving program.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aoi::DeliveryRecord;
use crate::sim::{serde_us, SimDuration, SimTime};
use crate::wnic::{NodeId, Packet, PacketKind};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", try_from = "PolicyRepr")]
pub enum SamplerPolicy {
    /// Sample again as soon as the previous update is reported complete.
    #[default]
    ZeroWait,
    /// Sample a fixed delay after each completion report.
    FixedWait {
        #[serde(rename = "delay_us", with = "serde_us")]
        delay: SimDuration,
    },
    /// Sample back to back, ignoring the network.
    Saturating,
    /// Sample periodically into a one-slot buffer drained by polls.
    Wifresh { rate_hz: f64 },
}

// Flat form so that keys belonging to another policy kind are rejected.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyRepr {
    kind: String,
    #[serde(default, with = "serde_us::option")]
    delay_us: Option<SimDuration>,
    rate_hz: Option<f64>,
}

impl TryFrom<PolicyRepr> for SamplerPolicy {
    type Error = String;

    fn try_from(r: PolicyRepr) -> Result<Self, String> {
        let policy = match (r.kind.as_str(), r.delay_us, r.rate_hz) {
            ("zero_wait", None, None) => SamplerPolicy::ZeroWait,
            ("saturating", None, None) => SamplerPolicy::Saturating,
            ("fixed_wait", Some(delay), None) => SamplerPolicy::FixedWait { delay },
            ("wifresh", None, Some(rate_hz)) => SamplerPolicy::Wifresh { rate_hz },
            ("fixed_wait", None, _) => return Err("fixed_wait needs delay_us".into()),
            ("wifresh", _, None) => return Err("wifresh needs rate_hz".into()),
            ("zero_wait" | "saturating" | "fixed_wait" | "wifresh", _, _) => {
                return Err(format!("policy kind {} does not take that key", r.kind))
            }
            (other, _, _) => {
                return Err(format!(
                    "unknown policy kind {other:?}, expected zero_wait, fixed_wait, saturating or wifresh"
                ))
            }
        };
        Ok(policy)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AppError {
    #[error("wifresh rate must be positive and finite, got {0}")]
    BadRate(f64),
    #[error("generation period {0}ns is not a whole number of ns above zero")]
    BadPeriod(f64),
}

impl SamplerPolicy {
    pub fn validate(&self) -> Result<(), AppError> {
        if let SamplerPolicy::Wifresh { rate_hz } = *self {
            if !(rate_hz.is_finite() && rate_hz > 0.0) {
                return Err(AppError::BadRate(rate_hz));
            }
            self.wifresh_period()?;
        }
        Ok(())
    }

    pub fn is_feedback_driven(&self) -> bool {
        matches!(self, SamplerPolicy::ZeroWait | SamplerPolicy::FixedWait { .. })
    }

    /// Waiting time inserted between a completion report and the sample.
    pub fn wait(&self) -> SimDuration {
        match *self {
            SamplerPolicy::FixedWait { delay } => delay,
            _ => SimDuration::ZERO,
        }
    }

    /// Generation period of the WiFresh source, rounded to whole ns.
    pub fn wifresh_period(&self) -> Result<Option<SimDuration>, AppError> {
        let SamplerPolicy::Wifresh { rate_hz } = *self else {
            return Ok(None);
        };
        let ns = (1e9 / rate_hz).round();
        if !(ns >= 1.0 && ns < u64::MAX as f64) {
            return Err(AppError::BadPeriod(ns));
        }
        Ok(Some(SimDuration::from_ns(ns as u64)))
    }
}

/// Feedback-driven sampling decisions.
#[derive(Debug, Clone)]
pub struct Sampler {
    policy: SamplerPolicy,
    compute: SimDuration,
    pub feedbacks: u64,
    pub ignored_feedbacks: u64,
}

impl Sampler {
    pub fn new(policy: SamplerPolicy, compute: SimDuration) -> Self {
        Sampler {
            policy,
            compute,
            feedbacks: 0,
            ignored_feedbacks: 0,
        }
    }

    pub fn policy(&self) -> SamplerPolicy {
        self.policy
    }

    pub fn compute_time(&self) -> SimDuration {
        self.compute
    }

    /// Time of the next generation triggered by a feedback arriving at
    /// `now`, or `None` when the policy does not listen to feedback.
    pub fn on_feedback(&mut self, now: SimTime) -> Option<SimTime> {
        if !self.policy.is_feedback_driven() {
            self.ignored_feedbacks += 1;
            return None;
        }
        self.feedbacks += 1;
        Some(now + self.policy.wait() + self.compute)
    }

    /// Next back-to-back generation of a saturating source.
    pub fn saturating_source(&self, now: SimTime) -> SimTime {
        now + self.compute
    }
}

/// Stamps out packets of one kind with increasing ids.
#[derive(Debug, Clone)]
pub struct PacketFactory {
    kind: PacketKind,
    ttl: u8,
    size_bytes: u32,
    src: NodeId,
    next_id: u64,
    made: u64,
}

impl PacketFactory {
    /// `id_base` keeps id ranges of different factories apart.
    pub fn new(kind: PacketKind, ttl: u8, size_bytes: u32, src: NodeId, id_base: u64) -> Self {
        PacketFactory {
            kind,
            ttl,
            size_bytes,
            src,
            next_id: id_base,
            made: 0,
        }
    }

    pub fn status_updates(ttl: u8, size_bytes: u32) -> Self {
        Self::new(PacketKind::StatusUpdate, ttl, size_bytes, NodeId::Source, 1)
    }

    pub fn made(&self) -> u64 {
        self.made
    }

    pub fn generate(&mut self, now: SimTime) -> Packet {
        let mut p = Packet::new(self.next_id, self.kind, now, self.ttl, self.size_bytes);
        p.src = self.src;
        p.dst = self.src.peer();
        self.next_id += 1;
        self.made += 1;
        p
    }
}

/// Newest-only application buffer of the WiFresh source.
#[derive(Debug, Default, Clone)]
pub struct AppLcfsBuffer {
    slot: Option<Packet>,
    pub discarded_count: u64,
}

impl AppLcfsBuffer {
    pub fn push(&mut self, packet: Packet) {
        if self.slot.replace(packet).is_some() {
            self.discarded_count += 1;
        }
    }

    pub fn pop(&mut self) -> Option<Packet> {
        self.slot.take()
    }

    pub fn is_empty(&self) -> bool {
        self.slot.is_none()
    }

    pub fn len(&self) -> usize {
        usize::from(self.slot.is_some())
    }
}

/// Destination-side poll schedule: first poll one period after start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Poller {
    pub period: SimDuration,
}

impl Poller {
    pub fn next_poll(&self, now: SimTime) -> SimTime {
        now + self.period
    }

    pub fn polls_within(&self, horizon: SimDuration) -> u64 {
        horizon.as_ns() / self.period.as_ns()
    }
}

/// The receiver program: keeps only updates newer than everything seen.
#[derive(Debug, Default, Clone)]
pub struct Receiver {
    newest_gen: Option<SimTime>,
    records: Vec<DeliveryRecord>,
    pub stale: u64,
}

impl Receiver {
    pub fn receiver_on_delivery(&mut self, packet: &Packet, deliver: SimTime) -> Option<DeliveryRecord> {
        debug_assert!(packet.is_status());
        if self.newest_gen.is_some_and(|g| packet.gen_time <= g) {
            self.stale += 1;
            return None;
        }
        let r = DeliveryRecord::new(packet.gen_time, deliver);
        self.newest_gen = Some(packet.gen_time);
        self.records.push(r);
        Some(r)
    }

    pub fn records(&self) -> &[DeliveryRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<DeliveryRecord> {
        self.records
    }
}
