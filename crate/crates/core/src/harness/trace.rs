//! Newline-delimited JSON trace: one row per accepted delivery, one per
//! feedback, then a summary row.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aoi::{AoiError, DeliveryRecord};
use crate::harness::report::{age_summary, AgeSummary, ScenarioReport};
use crate::sim::{SimDuration, SimTime};
use crate::wnic::Packet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryRow {
    pub packet_id: u64,
    pub gen_ns: u64,
    pub mac_arrival_ns: Option<u64>,
    pub tx_start_ns: Option<u64>,
    pub tx_end_ns: Option<u64>,
    pub rx_arrival_ns: Option<u64>,
    pub app_delivery_ns: u64,
    pub attempts: u32,
    pub resend_flag: bool,
}

impl DeliveryRow {
    pub fn new(p: &Packet, delivered: SimTime) -> Self {
        let ns = |t: Option<SimTime>| t.map(SimTime::as_ns);
        DeliveryRow {
            packet_id: p.id,
            gen_ns: p.gen_time.as_ns(),
            mac_arrival_ns: ns(p.stamps.mac_arrival),
            tx_start_ns: ns(p.stamps.tx_start),
            tx_end_ns: ns(p.stamps.tx_end),
            rx_arrival_ns: ns(p.stamps.rx_arrival),
            app_delivery_ns: delivered.as_ns(),
            attempts: p.stamps.attempts,
            resend_flag: p.stamps.resends > 0,
        }
    }

    pub fn record(&self) -> DeliveryRecord {
        DeliveryRecord::new(SimTime::from_ns(self.gen_ns), SimTime::from_ns(self.app_delivery_ns))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackRow {
    pub emit_ns: u64,
    pub sampler_arrival_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Delivery(DeliveryRow),
    Feedback(FeedbackRow),
    Summary(Box<ScenarioReport>),
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("trace has no summary row")]
    NoSummary,
    #[error("trace line {0} follows the summary row")]
    AfterSummary(usize),
    #[error(transparent)]
    Aoi(#[from] AoiError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub deliveries: Vec<DeliveryRow>,
    pub feedbacks: Vec<FeedbackRow>,
    pub summary: ScenarioReport,
}

impl Trace {
    /// Rows are merged in time order (delivery time for deliveries, sampler
    /// arrival for feedbacks, deliveries first on ties).
    pub fn write_ndjson<W: Write>(&self, mut w: W) -> Result<(), TraceError> {
        let (mut d, mut f) = (self.deliveries.iter().peekable(), self.feedbacks.iter().peekable());
        loop {
            let take_delivery = match (d.peek(), f.peek()) {
                (Some(a), Some(b)) => a.app_delivery_ns <= b.sampler_arrival_ns,
                (Some(_), None) => true,
                (None, Some(_)) => false,
                (None, None) => break,
            };
            let line = if take_delivery {
                serde_json::to_string(&Line::Delivery(*d.next().expect("peeked")))
            } else {
                serde_json::to_string(&Line::Feedback(*f.next().expect("peeked")))
            }
            .expect("trace rows serialize");
            writeln!(w, "{line}")?;
        }
        let summary = serde_json::to_string(&Line::Summary(Box::new(self.summary.clone()))).expect("summary serializes");
        writeln!(w, "{summary}")?;
        w.flush()?;
        Ok(())
    }

    pub fn read_ndjson<R: BufRead>(r: R) -> Result<Trace, TraceError> {
        let mut deliveries = Vec::new();
        let mut feedbacks = Vec::new();
        let mut summary = None;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if summary.is_some() {
                return Err(TraceError::AfterSummary(i + 1));
            }
            match serde_json::from_str(&line).map_err(|source| TraceError::Parse { line: i + 1, source })? {
                Line::Delivery(d) => deliveries.push(d),
                Line::Feedback(f) => feedbacks.push(f),
                Line::Summary(s) => summary = Some(*s),
            }
        }
        Ok(Trace {
            deliveries,
            feedbacks,
            summary: summary.ok_or(TraceError::NoSummary)?,
        })
    }

    pub fn records(&self) -> Vec<DeliveryRecord> {
        self.deliveries.iter().map(DeliveryRow::record).collect()
    }

    /// Age results derived from the delivery rows and the horizon in the
    /// summary alone.
    pub fn recompute_ages(&self) -> Result<AgeSummary, TraceError> {
        Ok(age_summary(
            &self.records(),
            SimDuration::from_ns(self.summary.warmup_ns),
            SimDuration::from_ns(self.summary.duration_ns),
        )?)
    }
}
