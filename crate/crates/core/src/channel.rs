//! Shared wireless medium: CSMA/CA acquisition with binary exponential
//! backoff, per-attempt Bernoulli loss, frame airtime, and optional
//! background busy periods from neighbouring networks.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{serde_us, RngStream, SimDuration, SimTime};
use crate::wnic::Packet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateEntry {
    pub rate_mbps: f64,
    /// Probability that a single attempt at this rate is acknowledged.
    pub success_prob: f64,
}

/// Alternating exponential busy/idle periods occupying the medium.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundBusy {
    #[serde(rename = "mean_busy_us", with = "serde_us")]
    pub mean_busy: SimDuration,
    #[serde(rename = "mean_idle_us", with = "serde_us")]
    pub mean_idle: SimDuration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    #[serde(rename = "slot_us", with = "serde_us")]
    pub slot: SimDuration,
    #[serde(rename = "difs_us", with = "serde_us")]
    pub difs: SimDuration,
    #[serde(rename = "sifs_us", with = "serde_us")]
    pub sifs: SimDuration,
    pub cw_min: u32,
    pub cw_max: u32,
    #[serde(rename = "phy_overhead_us", with = "serde_us")]
    pub phy_overhead: SimDuration,
    #[serde(rename = "ack_us", with = "serde_us")]
    pub ack: SimDuration,
    /// Time the sender waits for a missing ACK; `sifs + ack` when unset.
    #[serde(
        rename = "ack_timeout_us",
        with = "serde_us::option",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    pub ack_timeout: Option<SimDuration>,
    pub rate_table: Vec<RateEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background_busy: Option<BackgroundBusy>,
}

impl Default for ChannelConfig {
    /// 802.11g-like timing with a four-rate table and light neighbour
    /// activity on the medium.
    fn default() -> Self {
        ChannelConfig {
            slot: SimDuration::from_us(9),
            difs: SimDuration::from_us(28),
            sifs: SimDuration::from_us(10),
            cw_min: 15,
            cw_max: 1023,
            phy_overhead: SimDuration::from_us(20),
            ack: SimDuration::from_us(24),
            ack_timeout: None,
            rate_table: vec![
                RateEntry { rate_mbps: 54.0, success_prob: 0.90 },
                RateEntry { rate_mbps: 48.0, success_prob: 0.93 },
                RateEntry { rate_mbps: 36.0, success_prob: 0.96 },
                RateEntry { rate_mbps: 24.0, success_prob: 0.98 },
            ],
            background_busy: Some(BackgroundBusy {
                mean_busy: SimDuration::from_us(300),
                mean_idle: SimDuration::from_us(500),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChannelError {
    #[error("rate {0} Mbps is not in the channel rate table")]
    UnknownRate(f64),
    #[error("packet size must be positive")]
    EmptyPacket,
    #[error("invalid channel config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<(), ChannelError> {
        let bad = |field, reason: &str| ChannelError::InvalidConfig {
            field,
            reason: reason.to_owned(),
        };
        if self.cw_min > self.cw_max {
            return Err(bad("cw_min", "must not exceed cw_max"));
        }
        for (field, d) in [
            ("slot_us", self.slot),
            ("difs_us", self.difs),
            ("sifs_us", self.sifs),
            ("phy_overhead_us", self.phy_overhead),
            ("ack_us", self.ack),
        ] {
            if d.is_zero() {
                return Err(bad(field, "must be > 0"));
            }
        }
        if self.ack_timeout.is_some_and(|d| d.is_zero()) {
            return Err(bad("ack_timeout_us", "must be > 0"));
        }
        if self.rate_table.is_empty() {
            return Err(bad("rate_table", "must not be empty"));
        }
        for pair in self.rate_table.windows(2) {
            if pair[0].rate_mbps <= pair[1].rate_mbps {
                return Err(bad("rate_table", "rates must be strictly descending"));
            }
        }
        for r in &self.rate_table {
            if !(r.rate_mbps.is_finite() && r.rate_mbps > 0.0) {
                return Err(bad("rate_table.rate_mbps", "must be a positive number"));
            }
            if !(0.0..=1.0).contains(&r.success_prob) {
                return Err(bad("rate_table.success_prob", "must lie in [0, 1]"));
            }
        }
        if let Some(bg) = &self.background_busy {
            if bg.mean_busy.is_zero() || bg.mean_idle.is_zero() {
                return Err(bad("background_busy", "mean busy and idle must be > 0"));
            }
        }
        Ok(())
    }

    pub fn rates(&self) -> impl Iterator<Item = f64> + '_ {
        self.rate_table.iter().map(|r| r.rate_mbps)
    }

    pub fn entry(&self, rate_mbps: f64) -> Result<&RateEntry, ChannelError> {
        self.rate_table
            .iter()
            .find(|r| r.rate_mbps == rate_mbps)
            .ok_or(ChannelError::UnknownRate(rate_mbps))
    }

    /// Contention window (in slots) for the given retry index.
    pub fn contention_window(&self, attempt_index: u32) -> u32 {
        let base = u64::from(self.cw_min) + 1;
        let grown = base
            .checked_shl(attempt_index.min(40))
            .unwrap_or(u64::MAX)
            .saturating_sub(1);
        grown.min(u64::from(self.cw_max)) as u32
    }

    /// `phy_overhead + ceil(8 * size / rate)` microseconds.
    pub fn airtime(&self, size_bytes: u32, rate_mbps: f64) -> Result<SimDuration, ChannelError> {
        if size_bytes == 0 {
            return Err(ChannelError::EmptyPacket);
        }
        self.entry(rate_mbps)?;
        let payload_us = (8.0 * f64::from(size_bytes) / rate_mbps).ceil() as u64;
        Ok(self.phy_overhead + SimDuration::from_us(payload_us))
    }

    fn ack_timeout(&self) -> SimDuration {
        self.ack_timeout.unwrap_or(self.sifs + self.ack)
    }

    /// Medium occupancy of one attempt, by outcome.
    pub fn busy_time(&self, airtime: SimDuration, success: bool) -> SimDuration {
        if success {
            airtime + self.sifs + self.ack
        } else {
            airtime + self.ack_timeout()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttemptOutcome {
    pub success: bool,
    pub busy_time: SimDuration,
}

/// Lazily generated alternating busy/idle timeline.
#[derive(Debug)]
struct BackgroundTimeline {
    busy: Exp<f64>,
    idle: Exp<f64>,
    rng: RngStream,
    intervals: VecDeque<(SimTime, SimTime)>,
    generated_until: SimTime,
}

impl BackgroundTimeline {
    fn new(cfg: BackgroundBusy, rng: RngStream) -> Self {
        BackgroundTimeline {
            busy: Exp::new(1.0 / cfg.mean_busy.as_ns() as f64).expect("positive mean"),
            idle: Exp::new(1.0 / cfg.mean_idle.as_ns() as f64).expect("positive mean"),
            rng,
            intervals: VecDeque::new(),
            generated_until: SimTime::ZERO,
        }
    }

    fn draw(dist: &Exp<f64>, rng: &mut RngStream) -> SimDuration {
        SimDuration::from_ns((dist.sample(rng).round() as u64).max(1))
    }

    fn extend_past(&mut self, t: SimTime) {
        while self.generated_until <= t {
            let start = self.generated_until + Self::draw(&self.idle, &mut self.rng);
            let end = start + Self::draw(&self.busy, &mut self.rng);
            self.intervals.push_back((start, end));
            self.generated_until = end;
        }
    }

    fn first_ending_after(&mut self, t: SimTime) -> Option<(SimTime, SimTime)> {
        self.extend_past(t);
        self.intervals.iter().copied().find(|&(_, end)| end > t)
    }

    fn prune(&mut self, floor: SimTime) {
        while self.intervals.front().is_some_and(|&(_, end)| end <= floor) {
            self.intervals.pop_front();
        }
    }
}

/// The medium as seen by every node in the scenario.
#[derive(Debug)]
pub struct Channel {
    cfg: ChannelConfig,
    backoff_rng: RngStream,
    loss_rng: RngStream,
    background: Option<BackgroundTimeline>,
    // Medium time already claimed by planned attempts, sorted by start.
    reservations: Vec<(SimTime, SimTime)>,
}

impl Channel {
    pub fn new(cfg: ChannelConfig, master_seed: u64) -> Result<Self, ChannelError> {
        cfg.validate()?;
        let background = cfg
            .background_busy
            .map(|bg| BackgroundTimeline::new(bg, RngStream::new(master_seed, "channel.background")));
        Ok(Channel {
            cfg,
            backoff_rng: RngStream::new(master_seed, "channel.backoff"),
            loss_rng: RngStream::new(master_seed, "channel.loss"),
            background,
            reservations: Vec::new(),
        })
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.cfg
    }

    pub fn airtime(&self, size_bytes: u32, rate_mbps: f64) -> Result<SimDuration, ChannelError> {
        self.cfg.airtime(size_bytes, rate_mbps)
    }

    /// Drops bookkeeping for medium activity that ended before `clock`.
    pub fn advance(&mut self, clock: SimTime) {
        self.reservations.retain(|&(_, end)| end > clock);
        if let Some(bg) = self.background.as_mut() {
            bg.prune(clock);
        }
    }

    /// Marks `[start, start + busy)` as occupied by a planned attempt.
    pub fn reserve(&mut self, start: SimTime, busy: SimDuration) {
        let iv = (start, start + busy);
        let pos = self.reservations.partition_point(|r| r.0 <= start);
        self.reservations.insert(pos, iv);
    }

    fn next_busy(&mut self, t: SimTime) -> Option<(SimTime, SimTime)> {
        let own = self.reservations.iter().copied().find(|&(_, end)| end > t);
        let bg = self.background.as_mut().and_then(|b| b.first_ending_after(t));
        match (own, bg) {
            (Some(a), Some(b)) => Some(if a.0 <= b.0 { a } else { b }),
            (a, b) => a.or(b),
        }
    }

    /// Time at which a station that starts contending at `now` may begin
    /// transmitting: DIFS plus a uniform backoff over `[0, CW]` slots,
    /// frozen while the medium is busy.
    pub fn acquire(&mut self, now: SimTime, attempt_index: u32) -> SimTime {
        self.acquire_for(now, attempt_index, SimDuration::ZERO)
    }

    /// Like [`acquire`](Self::acquire), but the medium must also stay free
    /// for `occupancy` after the grant. A busy period that would overlap the
    /// frame stops the countdown; the remaining slots resume after it.
    pub fn acquire_for(&mut self, now: SimTime, attempt_index: u32, occupancy: SimDuration) -> SimTime {
        let cw = self.cfg.contention_window(attempt_index);
        let mut remaining = u64::from(self.backoff_rng.random_range(0..=cw));
        let slot = self.cfg.slot;
        let difs = self.cfg.difs;
        let mut t = now;
        loop {
            let needed = difs + slot * remaining + occupancy;
            match self.next_busy(t) {
                Some((start, end)) if start <= t => t = end,
                Some((start, end)) if start < t + needed => {
                    let idle = start - t;
                    if let Some(counting) = idle.as_ns().checked_sub(difs.as_ns()) {
                        let consumed = counting / slot.as_ns();
                        remaining = remaining.saturating_sub(consumed);
                    }
                    t = end;
                }
                _ => return t + difs + slot * remaining,
            }
        }
    }

    /// One transmission attempt of `packet` at `rate_mbps`.
    pub fn attempt(&mut self, packet: &Packet, rate_mbps: f64) -> Result<AttemptOutcome, ChannelError> {
        let p = self.cfg.entry(rate_mbps)?.success_prob;
        let airtime = self.cfg.airtime(packet.size_bytes, rate_mbps)?;
        let success = self.loss_rng.random_bool(p);
        Ok(AttemptOutcome {
            success,
            busy_time: self.cfg.busy_time(airtime, success),
        })
    }

    /// Longest medium occupancy an attempt of this size/rate can have.
    pub fn max_busy_time(&self, size_bytes: u32, rate_mbps: f64) -> Result<SimDuration, ChannelError> {
        let air = self.cfg.airtime(size_bytes, rate_mbps)?;
        Ok(self.cfg.busy_time(air, true).max(self.cfg.busy_time(air, false)))
    }
}
