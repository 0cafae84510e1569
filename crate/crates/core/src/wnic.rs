//! WiFi NIC model.
//!
//! Transmit side: sixteen strict-priority FCFS queues with tail drop, and
//! execution of a per-packet retransmission table (highest rate first, up to
//! `max_attempts` channel attempts per rate). Receive side: interrupt
//! coalescing that holds arriving frames and hands them to the host in
//! batches.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use thiserror::Error;

use crate::channel::{Channel, ChannelConfig, ChannelError};
use crate::sim::{serde_us, SimDuration, SimTime};

pub const PRIORITY_LEVELS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PacketKind {
    StatusUpdate,
    Other,
    Poll,
    Feedback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeId {
    Source,
    Destination,
}

impl NodeId {
    pub fn peer(self) -> NodeId {
        match self {
            NodeId::Source => NodeId::Destination,
            NodeId::Destination => NodeId::Source,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            NodeId::Source => "source",
            NodeId::Destination => "destination",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateAttempts {
    pub rate_mbps: f64,
    pub max_attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TableError {
    #[error("retransmission table has no attempts")]
    NoAttempts,
    #[error("retransmission table rates must be strictly descending")]
    NotDescending,
    #[error("no supported rates")]
    NoRates,
}

/// Ordered (rate, max attempts) ladder the NIC walks for one packet.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetransmissionTable {
    entries: SmallVec<[RateAttempts; 4]>,
}

impl RetransmissionTable {
    pub fn new(entries: impl IntoIterator<Item = RateAttempts>) -> Result<Self, TableError> {
        let table = RetransmissionTable {
            entries: entries.into_iter().collect(),
        };
        table.validate()?;
        Ok(table)
    }

    /// Every rate, descending, with `per_rate` attempts each.
    pub fn ladder(rates: impl IntoIterator<Item = f64>, per_rate: u32) -> Result<Self, TableError> {
        Self::new(rates.into_iter().map(|rate_mbps| RateAttempts {
            rate_mbps,
            max_attempts: per_rate,
        }))
    }

    pub fn validate(&self) -> Result<(), TableError> {
        if self.entries.windows(2).any(|w| w[0].rate_mbps <= w[1].rate_mbps) {
            return Err(TableError::NotDescending);
        }
        if self.total_attempts() == 0 {
            return Err(TableError::NoAttempts);
        }
        Ok(())
    }

    pub fn entries(&self) -> &[RateAttempts] {
        &self.entries
    }

    pub fn total_attempts(&self) -> u32 {
        self.entries.iter().map(|e| e.max_attempts).sum()
    }
}

/// Rates a status update may use: the highest rate whose per-attempt
/// success probability reaches `threshold`, and every rate below it. If no
/// rate qualifies only the lowest rate is returned.
pub fn supported_rates(channel: &ChannelConfig, threshold: f64) -> Vec<f64> {
    match channel
        .rate_table
        .iter()
        .position(|r| r.success_prob >= threshold)
    {
        Some(i) => channel.rate_table[i..].iter().map(|r| r.rate_mbps).collect(),
        None => channel.rate_table.last().map(|r| r.rate_mbps).into_iter().collect(),
    }
}

/// Per-packet timestamps recorded along the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Lifecycle {
    pub mac_arrival: Option<SimTime>,
    pub tx_start: Option<SimTime>,
    pub tx_end: Option<SimTime>,
    pub rx_arrival: Option<SimTime>,
    pub attempts: u32,
    pub resends: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    pub id: u64,
    pub kind: PacketKind,
    pub gen_time: SimTime,
    pub ttl: u8,
    pub priority: u8,
    pub req_tx_status: bool,
    pub size_bytes: u32,
    pub src: NodeId,
    pub dst: NodeId,
    pub table: RetransmissionTable,
    pub stamps: Lifecycle,
}

impl Packet {
    /// A source-to-destination packet with priority 0 and no table yet.
    pub fn new(id: u64, kind: PacketKind, gen_time: SimTime, ttl: u8, size_bytes: u32) -> Self {
        Packet {
            id,
            kind,
            gen_time,
            ttl,
            priority: 0,
            req_tx_status: false,
            size_bytes,
            src: NodeId::Source,
            dst: NodeId::Destination,
            table: RetransmissionTable::default(),
            stamps: Lifecycle::default(),
        }
    }

    pub fn is_status(&self) -> bool {
        self.kind == PacketKind::StatusUpdate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PriorityCounters {
    pub enqueued: u64,
    pub dropped: u64,
    pub dequeued: u64,
}

/// Strict-priority FCFS queues with per-queue tail drop.
#[derive(Debug)]
pub struct TxQueues {
    depth: usize,
    queues: [VecDeque<Packet>; PRIORITY_LEVELS],
    counters: [PriorityCounters; PRIORITY_LEVELS],
}

impl TxQueues {
    pub fn new(depth: usize) -> Self {
        TxQueues {
            depth,
            queues: std::array::from_fn(|_| VecDeque::new()),
            counters: [PriorityCounters::default(); PRIORITY_LEVELS],
        }
    }

    /// Appends to the queue selected by `packet.priority`. Returns the packet
    /// back if that queue is full.
    #[allow(clippy::result_large_err)]
    pub fn enqueue(&mut self, packet: Packet) -> Result<(), Packet> {
        let p = usize::from(packet.priority).min(PRIORITY_LEVELS - 1);
        if self.queues[p].len() >= self.depth {
            self.counters[p].dropped += 1;
            return Err(packet);
        }
        self.counters[p].enqueued += 1;
        self.queues[p].push_back(packet);
        Ok(())
    }

    /// Head of the highest-priority non-empty queue.
    pub fn dequeue_next(&mut self) -> Option<Packet> {
        let p = (0..PRIORITY_LEVELS).rev().find(|&p| !self.queues[p].is_empty())?;
        self.counters[p].dequeued += 1;
        self.queues[p].pop_front()
    }

    pub fn len(&self, priority: u8) -> usize {
        self.queues[usize::from(priority)].len()
    }

    pub fn total_len(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_len() == 0
    }

    pub fn counters(&self, priority: u8) -> PriorityCounters {
        self.counters[usize::from(priority)]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Packet> {
        self.queues.iter().flat_map(|q| q.iter())
    }
}

/// Completion report handed to the MAC layer after every transmission.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransmissionStatus {
    pub packet_id: u64,
    pub ack: bool,
    pub attempts_used: u32,
    pub completion_time: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttemptRecord {
    pub start: SimTime,
    pub end: SimTime,
    pub attempt_index: u32,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TxOutcome {
    pub status: TransmissionStatus,
    pub attempts: Vec<AttemptRecord>,
    /// When the acknowledged copy finished arriving at the receiver.
    pub rx_arrival: Option<SimTime>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransmitError {
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

/// Walks `table` from the first entry, contending for the medium before
/// every attempt, until an attempt is acknowledged or attempts run out.
pub fn nic_transmit(
    channel: &mut Channel,
    now: SimTime,
    packet: &Packet,
    table: &RetransmissionTable,
) -> Result<TxOutcome, TransmitError> {
    table.validate()?;
    let mut t = now;
    let mut attempt_index = 0u32;
    let mut attempts = Vec::new();
    let mut rx_arrival = None;
    'ladder: for entry in table.entries() {
        for _ in 0..entry.max_attempts {
            let occupancy = channel.max_busy_time(packet.size_bytes, entry.rate_mbps)?;
            let grant = channel.acquire_for(t, attempt_index, occupancy);
            let outcome = channel.attempt(packet, entry.rate_mbps)?;
            channel.reserve(grant, outcome.busy_time);
            let end = grant + outcome.busy_time;
            attempts.push(AttemptRecord {
                start: grant,
                end,
                attempt_index,
                success: outcome.success,
            });
            attempt_index += 1;
            t = end;
            if outcome.success {
                rx_arrival = Some(grant + channel.airtime(packet.size_bytes, entry.rate_mbps)?);
                break 'ladder;
            }
        }
    }
    Ok(TxOutcome {
        status: TransmissionStatus {
            packet_id: packet.id,
            ack: rx_arrival.is_some(),
            attempts_used: attempt_index,
            completion_time: t,
        },
        attempts,
        rx_arrival,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NicCounters {
    pub enqueues: u64,
    pub drops: u64,
    pub transmissions: u64,
    pub attempts: u64,
    pub acks: u64,
    pub failures: u64,
}

/// Transmit side of one node's NIC.
#[derive(Debug)]
pub struct Nic {
    pub queues: TxQueues,
    in_service: Option<u64>,
    pub counters: NicCounters,
}

impl Nic {
    pub fn new(queue_depth: usize) -> Self {
        Nic {
            queues: TxQueues::new(queue_depth),
            in_service: None,
            counters: NicCounters::default(),
        }
    }

    #[allow(clippy::result_large_err)]
    pub fn nic_enqueue(&mut self, packet: Packet) -> Result<(), Packet> {
        let r = self.queues.enqueue(packet);
        match r {
            Ok(()) => self.counters.enqueues += 1,
            Err(_) => self.counters.drops += 1,
        }
        r
    }

    pub fn is_busy(&self) -> bool {
        self.in_service.is_some()
    }

    pub fn in_service(&self) -> Option<u64> {
        self.in_service
    }

    /// Dequeues the next packet if the NIC is idle and marks it in service.
    pub fn start_next(&mut self) -> Option<Packet> {
        if self.is_busy() {
            return None;
        }
        let p = self.queues.dequeue_next()?;
        self.in_service = Some(p.id);
        Some(p)
    }

    /// Records the completion of the in-service packet.
    pub fn complete(&mut self, status: &TransmissionStatus) {
        debug_assert_eq!(self.in_service, Some(status.packet_id));
        self.in_service = None;
        self.counters.transmissions += 1;
        self.counters.attempts += u64::from(status.attempts_used);
        if status.ack {
            self.counters.acks += 1;
        } else {
            self.counters.failures += 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoalescerConfig {
    pub enabled: bool,
    #[serde(rename = "threshold_low_us", with = "serde_us")]
    pub threshold_low: SimDuration,
    #[serde(rename = "threshold_high_us", with = "serde_us")]
    pub threshold_high: SimDuration,
}

impl Default for CoalescerConfig {
    fn default() -> Self {
        CoalescerConfig {
            enabled: true,
            threshold_low: SimDuration::from_us(500),
            threshold_high: SimDuration::from_us(2_000),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delivered<T> {
    pub item: T,
    pub arrival: SimTime,
    pub delivered: SimTime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOutcome<T> {
    /// Items handed to the host by this call (a burst whose deadline had
    /// already passed, or the item itself when coalescing is off).
    pub flushed: Vec<Delivered<T>>,
    /// Deadline of the currently open burst.
    pub flush_at: Option<SimTime>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CoalescerStats {
    pub interrupts: u64,
    pub delivered: u64,
    pub max_batch: u64,
    pub total_delay_ns: u64,
    pub max_delay_ns: u64,
}

impl CoalescerStats {
    pub fn mean_batch(&self) -> f64 {
        if self.interrupts == 0 {
            0.0
        } else {
            self.delivered as f64 / self.interrupts as f64
        }
    }

    pub fn mean_delay_us(&self) -> f64 {
        if self.delivered == 0 {
            0.0
        } else {
            self.total_delay_ns as f64 / self.delivered as f64 / 1e3
        }
    }
}

/// Receive interrupt mitigation.
///
/// An arrival with no open burst opens one and arms a flush `threshold_low`
/// later. Arrivals while a burst is open join it and move the flush to
/// `min(arrival + threshold_low, burst_start + threshold_high)`. A flush
/// hands every held frame to the host at once.
#[derive(Debug)]
pub struct Coalescer<T> {
    cfg: CoalescerConfig,
    held: Vec<(T, SimTime)>,
    burst_start: Option<SimTime>,
    last_arrival: Option<SimTime>,
    flush_at: Option<SimTime>,
    stats: CoalescerStats,
}

impl<T> Coalescer<T> {
    pub fn new(cfg: CoalescerConfig) -> Self {
        Coalescer {
            cfg,
            held: Vec::new(),
            burst_start: None,
            last_arrival: None,
            flush_at: None,
            stats: CoalescerStats::default(),
        }
    }

    pub fn stats(&self) -> &CoalescerStats {
        &self.stats
    }

    pub fn held(&self) -> impl Iterator<Item = &T> {
        self.held.iter().map(|(t, _)| t)
    }

    pub fn flush_at(&self) -> Option<SimTime> {
        self.flush_at
    }

    pub fn rx_ingest(&mut self, item: T, now: SimTime) -> IngestOutcome<T> {
        if !self.cfg.enabled {
            self.stats.interrupts += 1;
            self.stats.delivered += 1;
            self.stats.max_batch = self.stats.max_batch.max(1);
            return IngestOutcome {
                flushed: vec![Delivered {
                    item,
                    arrival: now,
                    delivered: now,
                }],
                flush_at: None,
            };
        }
        let flushed = match self.flush_at {
            Some(due) if now >= due => self.flush(now),
            _ => Vec::new(),
        };
        let open = match (self.burst_start, self.last_arrival) {
            (Some(start), Some(last)) if now - last <= self.cfg.threshold_low => Some(start),
            _ => None,
        };
        let deadline = match open {
            Some(start) => (now + self.cfg.threshold_low).min(start + self.cfg.threshold_high),
            None => {
                self.burst_start = Some(now);
                now + self.cfg.threshold_low
            }
        };
        self.last_arrival = Some(now);
        self.held.push((item, now));
        self.flush_at = Some(deadline);
        IngestOutcome {
            flushed,
            flush_at: self.flush_at,
        }
    }

    /// Delivers every held frame at `now` and closes the burst.
    pub fn flush(&mut self, now: SimTime) -> Vec<Delivered<T>> {
        self.burst_start = None;
        self.last_arrival = None;
        self.flush_at = None;
        if self.held.is_empty() {
            return Vec::new();
        }
        let batch: Vec<Delivered<T>> = self
            .held
            .drain(..)
            .map(|(item, arrival)| Delivered {
                item,
                arrival,
                delivered: now,
            })
            .collect();
        self.stats.interrupts += 1;
        self.stats.delivered += batch.len() as u64;
        self.stats.max_batch = self.stats.max_batch.max(batch.len() as u64);
        for d in &batch {
            let delay = (d.delivered - d.arrival).as_ns();
            self.stats.total_delay_ns += delay;
            self.stats.max_delay_ns = self.stats.max_delay_ns.max(delay);
        }
        batch
    }
}

/// Runs the coalescer over a sorted arrival sequence with its flush timer
/// fired on time, returning `(arrival, delivery)` per frame in order.
pub fn coalesce_arrivals(cfg: CoalescerConfig, arrivals: &[SimTime]) -> Vec<(SimTime, SimTime)> {
    let mut c = Coalescer::new(cfg);
    let mut out: Vec<(usize, Delivered<usize>)> = Vec::new();
    let mut push = |batch: Vec<Delivered<usize>>| out.extend(batch.into_iter().map(|d| (d.item, d)));
    for (i, &t) in arrivals.iter().enumerate() {
        if let Some(due) = c.flush_at() {
            if due < t {
                push(c.flush(due));
            }
        }
        push(c.rx_ingest(i, t).flushed);
    }
    if let Some(due) = c.flush_at() {
        push(c.flush(due));
    }
    out.sort_by_key(|(i, _)| *i);
    out.into_iter().map(|(_, d)| (d.arrival, d.delivered)).collect()
}
