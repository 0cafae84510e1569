//! Per-run summary.

use serde::{Deserialize, Serialize};

use crate::aoi::{
    analytic_average_aoi, empirical_average_aoi, rta_statistics, slotted_pairs, AoiError, AoiSeries,
    DeliveryRecord, SummaryStats,
};
use crate::freshfi::FreshFiCounters;
use crate::harness::config::ScenarioConfig;
use crate::harness::world::StatusLedger;
use crate::sim::{SimDuration, SimTime};
use crate::wnic::{CoalescerStats, NicCounters};

/// Slot width used when evaluating the slotted closed form on a run.
pub const FORMULA_SLOT: SimDuration = SimDuration::from_us(1);
/// Threshold for the RTA tail fraction.
pub const RTA_TAIL_THRESHOLD: SimDuration = SimDuration::from_us(100);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct InFlight {
    pub descent: u64,
    pub lcfs: u64,
    pub queued: u64,
    pub in_service: u64,
    pub coalescer: u64,
}

impl InFlight {
    pub fn total(&self) -> u64 {
        self.descent + self.lcfs + self.queued + self.in_service + self.coalescer
    }
}

/// Fate of every status update generated during the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusCounts {
    pub generated: u64,
    pub delivered: u64,
    pub stale: u64,
    pub dropped: u64,
    pub lost: u64,
    pub discarded: u64,
    pub in_flight: InFlight,
    pub transmissions: u64,
    pub resends: u64,
}

impl StatusCounts {
    pub fn conserved(&self) -> bool {
        self.generated
            == self.delivered + self.stale + self.dropped + self.lost + self.discarded + self.in_flight.total()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackCounts {
    pub emitted: u64,
    /// Handed to the tunnel with an arrival time.
    pub delivered: u64,
    /// Reached the sampler before the run ended.
    pub received: u64,
    pub suppressed: u64,
    pub ignored: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub seed: u64,
    pub duration_ns: u64,
    pub warmup_ns: u64,
    pub no_deliveries: bool,
    pub avg_aoi_continuous_us: Option<f64>,
    pub avg_aoi_discrete_us: Option<f64>,
    /// Accepted deliveries inside the accounting horizon.
    pub deliveries: u64,
    pub status: StatusCounts,
    pub conservation_ok: bool,
    pub nic_source: NicCounters,
    pub nic_destination: NicCounters,
    pub coalescer_source: CoalescerStats,
    pub coalescer_destination: CoalescerStats,
    pub freshfi: Option<FreshFiCounters>,
    pub rta_threshold_us: Option<f64>,
    pub rta: Option<SummaryStats>,
    pub feedbacks: FeedbackCounts,
    pub polls_sent: u64,
    pub polls_answered: u64,
    /// Most status updates ever held at once by the source MAC and NIC.
    pub max_source_status_in_flight: u32,
    pub events_dispatched: u64,
}

impl ScenarioReport {
    pub fn avg_aoi_ms(&self) -> Option<f64> {
        self.avg_aoi_continuous_us.map(|us| us / 1e3)
    }
}

/// Age values over `[warmup, duration]` from the full accepted record list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgeSummary {
    pub in_horizon: usize,
    pub continuous_us: Option<f64>,
    pub discrete_us: Option<f64>,
}

pub fn accounting_series(
    records: &[DeliveryRecord],
    warmup: SimDuration,
    duration: SimDuration,
) -> Result<Option<AoiSeries>, AoiError> {
    let (t_start, t_end) = (SimTime::ZERO + warmup, SimTime::ZERO + duration);
    if t_end <= t_start {
        return Ok(None);
    }
    let first = records.partition_point(|r| r.deliver < t_start);
    let last = records.partition_point(|r| r.deliver <= t_end);
    let initial = if first == 0 { SimTime::ZERO } else { records[first - 1].gen };
    AoiSeries::with_initial_gen(records[first..last].to_vec(), t_start, t_end, initial).map(Some)
}

pub fn age_summary(records: &[DeliveryRecord], warmup: SimDuration, duration: SimDuration) -> Result<AgeSummary, AoiError> {
    let Some(series) = accounting_series(records, warmup, duration)? else {
        return Ok(AgeSummary {
            in_horizon: 0,
            continuous_us: None,
            discrete_us: None,
        });
    };
    let n = series.records().len();
    if n < 2 {
        return Ok(AgeSummary {
            in_horizon: n,
            continuous_us: None,
            discrete_us: None,
        });
    }
    let continuous = empirical_average_aoi(&series)? / 1e3;
    let pairs = slotted_pairs(series.records(), FORMULA_SLOT)?;
    let discrete = match analytic_average_aoi(&pairs, FORMULA_SLOT) {
        Ok(ns) => Some(ns / 1e3),
        Err(AoiError::InsufficientDeliveries { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(AgeSummary {
        in_horizon: n,
        continuous_us: Some(continuous),
        discrete_us: discrete,
    })
}

pub(crate) struct ReportInputs<'a> {
    pub cfg: &'a ScenarioConfig,
    pub records: &'a [DeliveryRecord],
    pub stale: u64,
    pub ledger: StatusLedger,
    pub in_flight: InFlight,
    pub discarded: u64,
    pub source_nic: NicCounters,
    pub destination_nic: NicCounters,
    pub source_coalescer: CoalescerStats,
    pub destination_coalescer: CoalescerStats,
    pub freshfi: Option<FreshFiCounters>,
    pub feedbacks_emitted: u64,
    pub feedbacks_delivered: u64,
    pub feedbacks_received: u64,
    pub feedbacks_suppressed: u64,
    pub ignored_feedbacks: u64,
    pub polls_sent: u64,
    pub polls_answered: u64,
    pub rta: &'a [SimDuration],
    pub rta_threshold: Option<SimDuration>,
    pub max_source_status: u32,
    pub events_dispatched: u64,
}

pub(crate) fn build(i: ReportInputs<'_>) -> Result<ScenarioReport, AoiError> {
    let ages = age_summary(i.records, i.cfg.warmup, i.cfg.duration)?;
    let status = StatusCounts {
        generated: i.ledger.generated,
        delivered: i.records.len() as u64,
        stale: i.stale,
        dropped: i.ledger.dropped,
        lost: i.ledger.lost,
        discarded: i.discarded,
        in_flight: i.in_flight,
        transmissions: i.ledger.transmissions,
        resends: i.ledger.resends,
    };
    let rta = match rta_statistics(i.rta, RTA_TAIL_THRESHOLD) {
        Ok(s) => Some(s),
        Err(AoiError::EmptyInput) => None,
        Err(e) => return Err(e),
    };
    Ok(ScenarioReport {
        name: i.cfg.name.clone(),
        seed: i.cfg.seed,
        duration_ns: i.cfg.duration.as_ns(),
        warmup_ns: i.cfg.warmup.as_ns(),
        no_deliveries: ages.in_horizon == 0,
        avg_aoi_continuous_us: ages.continuous_us,
        avg_aoi_discrete_us: ages.discrete_us,
        deliveries: ages.in_horizon as u64,
        conservation_ok: status.conserved(),
        status,
        nic_source: i.source_nic,
        nic_destination: i.destination_nic,
        coalescer_source: i.source_coalescer,
        coalescer_destination: i.destination_coalescer,
        freshfi: i.freshfi,
        rta_threshold_us: i.rta_threshold.map(|d| d.as_us_f64()),
        rta,
        feedbacks: FeedbackCounts {
            emitted: i.feedbacks_emitted,
            delivered: i.feedbacks_delivered,
            received: i.feedbacks_received,
            suppressed: i.feedbacks_suppressed,
            ignored: i.ignored_feedbacks,
        },
        polls_sent: i.polls_sent,
        polls_answered: i.polls_answered,
        max_source_status_in_flight: i.max_source_status,
        events_dispatched: i.events_dispatched,
    })
}
