//! One source, one destination and the medium between them, driven by the
//! event scheduler.

use rand_distr::{Distribution, Exp};
use thiserror::Error;

use crate::aoi::AoiError;
use crate::app::{AppLcfsBuffer, PacketFactory, Poller, Receiver, Sampler, SamplerPolicy};
use crate::channel::{Channel, ChannelError};
use crate::freshfi::{CollectorAction, FreshFiError, FreshFiMac, Tunnel, TunnelError, TunnelLatency};
use crate::harness::config::{ConfigError, ScenarioConfig};
use crate::harness::report::{self, ScenarioReport};
use crate::harness::trace::{DeliveryRow, FeedbackRow, Trace};
use crate::sim::{DispatchRecord, Event, EventHandle, EventTag, RngStream, Scheduler, SimDuration, SimError, SimTime};
use crate::wnic::{
    nic_transmit, supported_rates, Coalescer, Delivered, Nic, NodeId, Packet, PacketKind, RetransmissionTable,
    TableError, TransmitError, TxOutcome,
};

const POLL_ID_BASE: u64 = 1 << 40;
const BACKGROUND_ID_BASE: u64 = 2 << 40;

#[derive(Debug, Clone)]
pub enum SimEvent {
    Generate,
    WifreshGenerate,
    MacArrival(Box<Packet>),
    TxComplete(NodeId),
    RxArrival(NodeId, Box<Packet>),
    CoalescerFlush(NodeId),
    FeedbackArrival { emit: SimTime },
    PollTimer,
    BackgroundTraffic,
    WarmupEnd,
}

impl EventTag for SimEvent {
    fn tag(&self) -> &'static str {
        match self {
            SimEvent::Generate => "generate",
            SimEvent::WifreshGenerate => "wifresh_generate",
            SimEvent::MacArrival(_) => "mac_arrival",
            SimEvent::TxComplete(_) => "tx_complete",
            SimEvent::RxArrival(..) => "rx_arrival",
            SimEvent::CoalescerFlush(_) => "coalescer_flush",
            SimEvent::FeedbackArrival { .. } => "feedback_arrival",
            SimEvent::PollTimer => "poll_timer",
            SimEvent::BackgroundTraffic => "background",
            SimEvent::WarmupEnd => "warmup_end",
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    FreshFi(#[from] FreshFiError),
    #[error(transparent)]
    Tunnel(#[from] TunnelError),
    #[error(transparent)]
    Transmit(#[from] TransmitError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Aoi(#[from] AoiError),
    #[error("internal invariant broken: {0}")]
    Invariant(String),
}

#[derive(Debug)]
struct InService {
    packet: Packet,
    outcome: TxOutcome,
    /// Frame still on its way to the peer.
    rx_pending: bool,
}

#[derive(Debug)]
struct Node {
    id: NodeId,
    nic: Nic,
    coalescer: Coalescer<Packet>,
    flush: Option<EventHandle>,
    current: Option<InService>,
    delivered_other: u64,
}

impl Node {
    fn new(id: NodeId, cfg: &ScenarioConfig) -> Self {
        Node {
            id,
            nic: Nic::new(cfg.nic.queue_depth),
            coalescer: Coalescer::new(cfg.nic.coalescer),
            flush: None,
            current: None,
            delivered_other: 0,
        }
    }

    fn target(&self) -> &'static str {
        self.id.label()
    }
}

/// Status-update accounting used for the conservation check.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct StatusLedger {
    pub generated: u64,
    pub in_descent: u64,
    pub dropped: u64,
    pub lost: u64,
    pub transmissions: u64,
    pub resends: u64,
}

/// Everything a finished run leaves behind.
#[derive(Debug)]
pub struct RunOutput {
    pub report: ScenarioReport,
    pub trace: Trace,
    pub dispatch_log: Option<Vec<DispatchRecord>>,
}

pub struct World {
    cfg: ScenarioConfig,
    channel: Channel,
    source: Node,
    destination: Node,
    mac: Option<FreshFiMac>,
    default_table: RetransmissionTable,
    tunnel: Tunnel,
    sampler: Sampler,
    wifresh_period: Option<SimDuration>,
    poller: Poller,
    status_gen: PacketFactory,
    poll_gen: PacketFactory,
    background_gen: PacketFactory,
    background_rng: RngStream,
    background_gap: Option<Exp<f64>>,
    lcfs: AppLcfsBuffer,
    receiver: Receiver,
    warm: bool,
    awaiting_mac: Option<SimTime>,
    rta_warmup: Vec<SimDuration>,
    rta: Vec<SimDuration>,
    ledger: StatusLedger,
    /// Status updates at the source MAC, in its queues or in service.
    source_status: u32,
    max_source_status: u32,
    feedbacks_emitted: u64,
    polls_sent: u64,
    polls_answered: u64,
    delivery_rows: Vec<DeliveryRow>,
    feedback_rows: Vec<FeedbackRow>,
}

impl World {
    pub fn new(cfg: ScenarioConfig) -> Result<Self, RunError> {
        cfg.validate()?;
        let channel = Channel::new(cfg.channel.clone(), cfg.seed)?;
        let rates = supported_rates(&cfg.channel, cfg.nic.support_threshold);
        let default_table = RetransmissionTable::ladder(cfg.channel.rates(), cfg.nic.attempts_per_rate)?;
        let fixed = cfg.app.compute + cfg.app.descent;
        let latency = TunnelLatency::resolve(&cfg.freshfi.tunnel_latency, fixed)?;
        let threshold = cfg.freshfi.rta_threshold.unwrap_or(latency.mean() + fixed);
        let tunnel_on = cfg.freshfi.enabled && cfg.freshfi.features.tunnel;
        let tunnel = Tunnel::new(tunnel_on, latency, cfg.seed);
        let mac = if cfg.freshfi.enabled {
            Some(FreshFiMac::new(cfg.freshfi.clone(), &rates, default_table.clone(), threshold)?)
        } else {
            None
        };
        let ttl = if cfg.freshfi.enabled {
            cfg.freshfi.status_ttl
        } else {
            cfg.app.neutral_ttl
        };
        let background_gap = match cfg.app.background {
            Some(bg) => Some(Exp::new(bg.rate_per_s).map_err(|e| RunError::Invariant(e.to_string()))?),
            None => None,
        };
        Ok(World {
            sampler: Sampler::new(cfg.app.policy, cfg.app.compute),
            wifresh_period: cfg.app.policy.wifresh_period().map_err(|e| RunError::Invariant(e.to_string()))?,
            poller: Poller { period: cfg.app.poll.period },
            status_gen: PacketFactory::status_updates(ttl, cfg.app.status_size_bytes),
            poll_gen: PacketFactory::new(
                PacketKind::Poll,
                cfg.app.neutral_ttl,
                cfg.app.poll.size_bytes,
                NodeId::Destination,
                POLL_ID_BASE,
            ),
            background_gen: PacketFactory::new(
                PacketKind::Other,
                cfg.app.neutral_ttl,
                cfg.app.background.map_or(1, |b| b.size_bytes),
                NodeId::Source,
                BACKGROUND_ID_BASE,
            ),
            background_rng: RngStream::new(cfg.seed, "app.background"),
            background_gap,
            source: Node::new(NodeId::Source, &cfg),
            destination: Node::new(NodeId::Destination, &cfg),
            channel,
            mac,
            default_table,
            tunnel,
            lcfs: AppLcfsBuffer::default(),
            receiver: Receiver::default(),
            warm: cfg.warmup.is_zero(),
            awaiting_mac: None,
            rta_warmup: Vec::new(),
            rta: Vec::new(),
            ledger: StatusLedger::default(),
            source_status: 0,
            max_source_status: 0,
            feedbacks_emitted: 0,
            polls_sent: 0,
            polls_answered: 0,
            delivery_rows: Vec::new(),
            feedback_rows: Vec::new(),
            cfg,
        })
    }

    fn node(&mut self, id: NodeId) -> &mut Node {
        match id {
            NodeId::Source => &mut self.source,
            NodeId::Destination => &mut self.destination,
        }
    }

    fn bootstrap(&mut self, sched: &mut Scheduler<SimEvent>) -> Result<(), RunError> {
        match self.cfg.app.policy {
            SamplerPolicy::ZeroWait | SamplerPolicy::FixedWait { .. } | SamplerPolicy::Saturating => {
                sched.schedule(SimTime::ZERO, "app", SimEvent::Generate)?;
            }
            SamplerPolicy::Wifresh { .. } => {
                sched.schedule(SimTime::ZERO, "app", SimEvent::WifreshGenerate)?;
                sched.schedule(self.poller.next_poll(SimTime::ZERO), "app", SimEvent::PollTimer)?;
            }
        }
        if self.background_gap.is_some() {
            let gap = self.next_background_gap();
            sched.schedule(SimTime::ZERO + gap, "app", SimEvent::BackgroundTraffic)?;
        }
        if !self.cfg.warmup.is_zero() {
            sched.schedule(SimTime::ZERO + self.cfg.warmup, "harness", SimEvent::WarmupEnd)?;
        }
        Ok(())
    }

    fn next_background_gap(&mut self) -> SimDuration {
        let exp = self.background_gap.expect("background traffic configured");
        let secs: f64 = exp.sample(&mut self.background_rng);
        SimDuration::from_ns(((secs * 1e9).round() as u64).max(1))
    }

    fn handle(&mut self, sched: &mut Scheduler<SimEvent>, ev: Event<SimEvent>) -> Result<(), RunError> {
        let now = ev.fire_time;
        match ev.payload {
            SimEvent::Generate => {
                let p = self.status_gen.generate(now);
                self.ledger.generated += 1;
                self.descend(sched, p)?;
                if self.cfg.app.policy == SamplerPolicy::Saturating {
                    sched.schedule(self.sampler.saturating_source(now), "app", SimEvent::Generate)?;
                }
            }
            SimEvent::WifreshGenerate => {
                let p = self.status_gen.generate(now);
                self.ledger.generated += 1;
                self.lcfs.push(p);
                let period = self.wifresh_period.expect("wifresh policy has a period");
                sched.schedule(now + period, "app", SimEvent::WifreshGenerate)?;
            }
            SimEvent::MacArrival(p) => self.on_mac_arrival(sched, now, *p)?,
            SimEvent::TxComplete(id) => self.on_tx_complete(sched, now, id)?,
            SimEvent::RxArrival(id, p) => self.on_rx_arrival(sched, now, id, *p)?,
            SimEvent::CoalescerFlush(id) => {
                let node = self.node(id);
                node.flush = None;
                let batch = node.coalescer.flush(now);
                self.deliver_batch(sched, id, batch)?;
            }
            SimEvent::FeedbackArrival { emit } => {
                self.feedback_rows.push(FeedbackRow {
                    emit_ns: emit.as_ns(),
                    sampler_arrival_ns: now.as_ns(),
                });
                if let Some(at) = self.sampler.on_feedback(now) {
                    self.awaiting_mac = Some(emit);
                    sched.schedule(at, "app", SimEvent::Generate)?;
                }
            }
            SimEvent::PollTimer => {
                let p = self.poll_gen.generate(now);
                self.polls_sent += 1;
                let p = self.prepare_default(p);
                self.enqueue(sched, now, NodeId::Destination, p)?;
                sched.schedule(self.poller.next_poll(now), "app", SimEvent::PollTimer)?;
            }
            SimEvent::BackgroundTraffic => {
                let p = self.background_gen.generate(now);
                self.on_mac_arrival(sched, now, p)?;
                let gap = self.next_background_gap();
                sched.schedule(now + gap, "app", SimEvent::BackgroundTraffic)?;
            }
            SimEvent::WarmupEnd => {
                self.warm = true;
                if self.cfg.freshfi.self_calibrate_threshold && !self.rta_warmup.is_empty() {
                    let sum: u128 = self.rta_warmup.iter().map(|d| u128::from(d.as_ns())).sum();
                    let mean = SimDuration::from_ns((sum / self.rta_warmup.len() as u128) as u64);
                    if let Some(mac) = self.mac.as_mut() {
                        mac.set_rta_threshold(mean);
                    }
                }
            }
        }
        self.max_source_status = self.max_source_status.max(self.source_status);
        Ok(())
    }

    /// Socket-to-MAC transit of a new status update.
    fn descend(&mut self, sched: &mut Scheduler<SimEvent>, p: Packet) -> Result<(), RunError> {
        self.ledger.in_descent += 1;
        sched.schedule_in(self.cfg.app.descent, "source.mac", SimEvent::MacArrival(Box::new(p)))?;
        Ok(())
    }

    fn prepare_default(&self, mut p: Packet) -> Packet {
        p.table = self.default_table.clone();
        p.priority = self.cfg.freshfi.other_priority;
        p
    }

    fn on_mac_arrival(&mut self, sched: &mut Scheduler<SimEvent>, now: SimTime, mut p: Packet) -> Result<(), RunError> {
        p.stamps.mac_arrival = Some(now);
        if p.is_status() {
            self.ledger.in_descent -= 1;
            if let Some(emit) = self.awaiting_mac.take() {
                let rta = now - emit - self.sampler.policy().wait();
                if self.warm {
                    self.rta.push(rta);
                } else {
                    self.rta_warmup.push(rta);
                }
            }
        }
        let p = match self.mac.as_mut() {
            Some(mac) => mac.process(p),
            None => self.prepare_default(p),
        };
        self.enqueue(sched, now, NodeId::Source, p)
    }

    fn enqueue(&mut self, sched: &mut Scheduler<SimEvent>, now: SimTime, id: NodeId, p: Packet) -> Result<(), RunError> {
        let status = p.is_status() && id == NodeId::Source;
        match self.node(id).nic.nic_enqueue(p) {
            Ok(()) => {
                if status {
                    self.source_status += 1;
                }
            }
            Err(dropped) => {
                if dropped.is_status() {
                    self.ledger.dropped += 1;
                }
            }
        }
        self.try_start(sched, now, id)
    }

    fn try_start(&mut self, sched: &mut Scheduler<SimEvent>, now: SimTime, id: NodeId) -> Result<(), RunError> {
        let World {
            source,
            destination,
            channel,
            ..
        } = self;
        let node = match id {
            NodeId::Source => source,
            NodeId::Destination => destination,
        };
        let Some(mut p) = node.nic.start_next() else {
            return Ok(());
        };
        channel.advance(now);
        let outcome = nic_transmit(channel, now, &p, &p.table)?;
        p.stamps.tx_start = outcome.attempts.first().map(|a| a.start);
        p.stamps.tx_end = Some(outcome.status.completion_time);
        p.stamps.attempts = outcome.status.attempts_used;
        if let Some(rx) = outcome.rx_arrival {
            let mut copy = p.clone();
            copy.stamps.rx_arrival = Some(rx);
            let peer = id.peer();
            sched.schedule(rx, peer.label(), SimEvent::RxArrival(peer, Box::new(copy)))?;
        }
        sched.schedule(outcome.status.completion_time, node.target(), SimEvent::TxComplete(id))?;
        if p.is_status() && id == NodeId::Source {
            self.ledger.transmissions += 1;
        }
        let rx_pending = outcome.rx_arrival.is_some();
        node.current = Some(InService {
            packet: p,
            outcome,
            rx_pending,
        });
        Ok(())
    }

    fn on_tx_complete(&mut self, sched: &mut Scheduler<SimEvent>, now: SimTime, id: NodeId) -> Result<(), RunError> {
        let node = self.node(id);
        let done = node
            .current
            .take()
            .ok_or_else(|| RunError::Invariant(format!("completion at idle {} NIC", id.label())))?;
        node.nic.complete(&done.outcome.status);
        if id == NodeId::Source && done.packet.is_status() {
            self.source_status -= 1;
            let action = match self.mac.as_mut() {
                Some(mac) => mac.on_tx_status(&done.packet, &done.outcome.status, now),
                None => CollectorAction::Ignored,
            };
            match action {
                CollectorAction::ResendBackup(again) => {
                    self.ledger.resends += 1;
                    self.enqueue(sched, now, NodeId::Source, again)?;
                }
                CollectorAction::SendFeedback => {
                    if !done.outcome.status.ack {
                        self.ledger.lost += 1;
                    }
                    self.feedbacks_emitted += 1;
                    if let Some(at) = self.tunnel.tunnel_deliver(now) {
                        sched.schedule(at, "app", SimEvent::FeedbackArrival { emit: now })?;
                    }
                }
                CollectorAction::Ignored => {
                    if !done.outcome.status.ack {
                        self.ledger.lost += 1;
                    }
                }
            }
        }
        self.try_start(sched, now, id)
    }

    fn on_rx_arrival(
        &mut self,
        sched: &mut Scheduler<SimEvent>,
        now: SimTime,
        id: NodeId,
        p: Packet,
    ) -> Result<(), RunError> {
        if let Some(cur) = self.node(id.peer()).current.as_mut() {
            if cur.packet.id == p.id {
                cur.rx_pending = false;
            }
        }
        let node = self.node(id);
        if let Some(h) = node.flush.take() {
            sched.cancel(h);
        }
        let outcome = node.coalescer.rx_ingest(p, now);
        if let Some(at) = outcome.flush_at {
            let target = node.target();
            node.flush = Some(sched.schedule(at, target, SimEvent::CoalescerFlush(id))?);
        }
        self.deliver_batch(sched, id, outcome.flushed)
    }

    fn deliver_batch(
        &mut self,
        sched: &mut Scheduler<SimEvent>,
        id: NodeId,
        batch: Vec<Delivered<Packet>>,
    ) -> Result<(), RunError> {
        for d in batch {
            match (id, d.item.kind) {
                (NodeId::Destination, PacketKind::StatusUpdate) => {
                    if self.receiver.receiver_on_delivery(&d.item, d.delivered).is_some() {
                        self.delivery_rows.push(DeliveryRow::new(&d.item, d.delivered));
                    }
                }
                (NodeId::Source, PacketKind::Poll) => {
                    if let Some(u) = self.lcfs.pop() {
                        self.polls_answered += 1;
                        self.descend(sched, u)?;
                    }
                }
                _ => self.node(id).delivered_other += 1,
            }
        }
        Ok(())
    }

    /// Status updates still somewhere in the pipeline, counted from the
    /// live structures rather than from the ledger.
    fn in_flight(&self) -> report::InFlight {
        let queued = self.source.nic.queues.iter().filter(|p| p.is_status()).count() as u64;
        // A failed frame stays here until its completion is handled.
        let in_service = self
            .source
            .current
            .as_ref()
            .filter(|c| c.packet.is_status() && (c.rx_pending || !c.outcome.status.ack))
            .map_or(0, |_| 1);
        let held = self.destination.coalescer.held().filter(|p| p.is_status()).count() as u64;
        report::InFlight {
            descent: self.ledger.in_descent,
            lcfs: self.lcfs.len() as u64,
            queued,
            in_service,
            coalescer: held,
        }
    }

    fn finish(self, sched: &mut Scheduler<SimEvent>) -> Result<RunOutput, RunError> {
        let in_flight = self.in_flight();
        let dispatched = sched.dispatched();
        let dispatch_log = sched.take_dispatch_log();
        let rta_threshold = self.mac.as_ref().map(|m| m.rta_threshold());
        let inputs = report::ReportInputs {
            cfg: &self.cfg,
            records: self.receiver.records(),
            stale: self.receiver.stale,
            ledger: self.ledger,
            in_flight,
            discarded: self.lcfs.discarded_count,
            source_nic: self.source.nic.counters,
            destination_nic: self.destination.nic.counters,
            source_coalescer: *self.source.coalescer.stats(),
            destination_coalescer: *self.destination.coalescer.stats(),
            freshfi: self.mac.as_ref().map(|m| m.counters),
            feedbacks_emitted: self.feedbacks_emitted,
            feedbacks_delivered: self.tunnel.delivered(),
            feedbacks_received: self.feedback_rows.len() as u64,
            feedbacks_suppressed: self.tunnel.suppressed(),
            ignored_feedbacks: self.sampler.ignored_feedbacks,
            polls_sent: self.polls_sent,
            polls_answered: self.polls_answered,
            rta: &self.rta,
            rta_threshold,
            max_source_status: self.max_source_status,
            events_dispatched: dispatched,
        };
        let report = report::build(inputs)?;
        Ok(RunOutput {
            trace: Trace {
                deliveries: self.delivery_rows,
                feedbacks: self.feedback_rows,
                summary: report.clone(),
            },
            report,
            dispatch_log,
        })
    }
}

/// Builds both nodes and the medium, runs to the configured duration and
/// summarizes.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunOutput, RunError> {
    let mut world = World::new(cfg.clone())?;
    let mut sched = Scheduler::new();
    if cfg.output.dispatch_log {
        sched = sched.with_dispatch_log();
    }
    world.bootstrap(&mut sched)?;
    sched.run_until(SimTime::ZERO + cfg.duration, |s, ev| world.handle(s, ev))?;
    world.finish(&mut sched)
}
