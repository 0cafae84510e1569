//! MAC-layer customization for status updates: packet filter, channel
//! access controller with its one-slot backup buffer, WNIC queue manager,
//! and the transmission status collector feeding the cross-layer tunnel.

mod tunnel;

pub use tunnel::{fit_mixture, MixtureComponent, Tunnel, TunnelError, TunnelLatency, TunnelLatencyModel};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{serde_us, SimDuration, SimTime};
use crate::wnic::{Packet, RateAttempts, RetransmissionTable, TableError, TransmissionStatus};

/// Independently switchable parts, for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Features {
    pub single_attempt_table: bool,
    pub queue_manager: bool,
    pub tunnel: bool,
    pub retransmit_decision: bool,
}

impl Default for Features {
    fn default() -> Self {
        Features {
            single_attempt_table: true,
            queue_manager: true,
            tunnel: true,
            retransmit_decision: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FreshFiConfig {
    /// Master switch; when off every packet takes the stock path.
    pub enabled: bool,
    pub status_ttl: u8,
    pub status_priority: u8,
    pub other_priority: u8,
    /// Local-age bound below which a failed update is resent. Defaults to
    /// the mean request-to-arrival interval of the configured pipeline.
    #[serde(
        rename = "rta_threshold_us",
        with = "serde_us::option",
        skip_serializing_if = "Option::is_none"
    )]
    pub rta_threshold: Option<SimDuration>,
    /// Replace the threshold with the RTA mean measured during warm-up.
    pub self_calibrate_threshold: bool,
    pub tunnel_latency: TunnelLatencyModel,
    pub features: Features,
}

impl Default for FreshFiConfig {
    fn default() -> Self {
        FreshFiConfig {
            enabled: true,
            status_ttl: 53,
            status_priority: 15,
            other_priority: 0,
            rta_threshold: None,
            self_calibrate_threshold: false,
            tunnel_latency: TunnelLatencyModel::rta_with_patch(),
            features: Features::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FreshFiError {
    #[error("invalid freshfi config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: &'static str },
    #[error(transparent)]
    Table(#[from] TableError),
}

impl FreshFiConfig {
    pub fn validate(&self) -> Result<(), FreshFiError> {
        if self.status_ttl == 0 {
            return Err(FreshFiError::InvalidConfig {
                field: "status_ttl",
                reason: "must lie in [1, 255]",
            });
        }
        if self.status_priority > 15 || self.other_priority > 15 {
            return Err(FreshFiError::InvalidConfig {
                field: "status_priority",
                reason: "priorities must lie in [0, 15]",
            });
        }
        if self.status_priority <= self.other_priority {
            return Err(FreshFiError::InvalidConfig {
                field: "status_priority",
                reason: "must exceed other_priority",
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    FreshFiPath,
    DefaultPath,
}

/// Highest supported rate gets one attempt, every lower rate none.
pub fn build_status_table(supported_rates: &[f64]) -> Result<RetransmissionTable, TableError> {
    if supported_rates.is_empty() {
        return Err(TableError::NoRates);
    }
    RetransmissionTable::new(supported_rates.iter().enumerate().map(|(i, &rate_mbps)| RateAttempts {
        rate_mbps,
        max_attempts: u32::from(i == 0),
    }))
}

/// Capacity-one store of the last admitted status update.
#[derive(Debug, Default, Clone)]
pub struct BackupBuffer {
    slot: Option<Packet>,
}

impl BackupBuffer {
    pub fn store(&mut self, packet: Packet) {
        self.slot = Some(packet);
    }

    pub fn get(&self) -> Option<&Packet> {
        self.slot.as_ref()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CollectorAction {
    SendFeedback,
    ResendBackup(Packet),
    /// Not a status update, or a status for a packet the backup no longer
    /// holds.
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FreshFiCounters {
    pub filter_hits: u64,
    pub admitted: u64,
    pub feedbacks: u64,
    pub resends: u64,
    pub unknown_status: u64,
}

/// The status-update path through the MAC layer of the source node.
#[derive(Debug)]
pub struct FreshFiMac {
    cfg: FreshFiConfig,
    status_table: RetransmissionTable,
    default_table: RetransmissionTable,
    backup: BackupBuffer,
    rta_threshold: SimDuration,
    pub counters: FreshFiCounters,
}

impl FreshFiMac {
    pub fn new(
        cfg: FreshFiConfig,
        supported_rates: &[f64],
        default_table: RetransmissionTable,
        rta_threshold: SimDuration,
    ) -> Result<Self, FreshFiError> {
        cfg.validate()?;
        Ok(FreshFiMac {
            status_table: build_status_table(supported_rates)?,
            cfg,
            default_table,
            backup: BackupBuffer::default(),
            rta_threshold,
            counters: FreshFiCounters::default(),
        })
    }

    pub fn config(&self) -> &FreshFiConfig {
        &self.cfg
    }

    pub fn backup(&self) -> &BackupBuffer {
        &self.backup
    }

    pub fn rta_threshold(&self) -> SimDuration {
        self.rta_threshold
    }

    pub fn set_rta_threshold(&mut self, threshold: SimDuration) {
        self.rta_threshold = threshold;
    }

    /// Routes by TTL alone.
    pub fn filter(&mut self, packet: &Packet) -> Route {
        if self.cfg.enabled && packet.ttl == self.cfg.status_ttl {
            self.counters.filter_hits += 1;
            Route::FreshFiPath
        } else {
            Route::DefaultPath
        }
    }

    /// Channel access controller: requests a transmission status, installs
    /// the status table and keeps a copy in the backup buffer.
    pub fn admit(&mut self, mut packet: Packet) -> Packet {
        packet.req_tx_status = true;
        packet.table = if self.cfg.features.single_attempt_table {
            self.status_table.clone()
        } else {
            self.default_table.clone()
        };
        self.backup.store(packet.clone());
        self.counters.admitted += 1;
        packet
    }

    /// WNIC queue manager.
    pub fn assign_priority(&self, mut packet: Packet, route: Route) -> Packet {
        packet.priority = match route {
            Route::FreshFiPath if self.cfg.features.queue_manager => self.cfg.status_priority,
            _ => self.cfg.other_priority,
        };
        packet
    }

    /// Stock path: untouched apart from the default priority and table.
    pub fn prepare_default(&self, mut packet: Packet) -> Packet {
        packet.table = self.default_table.clone();
        self.assign_priority(packet, Route::DefaultPath)
    }

    /// Full MAC processing of a packet arriving from the network layer.
    pub fn process(&mut self, packet: Packet) -> Packet {
        match self.filter(&packet) {
            Route::FreshFiPath => {
                let p = self.admit(packet);
                self.assign_priority(p, Route::FreshFiPath)
            }
            Route::DefaultPath => self.prepare_default(packet),
        }
    }

    /// Transmission status collector.
    pub fn on_tx_status(&mut self, packet: &Packet, status: &TransmissionStatus, now: SimTime) -> CollectorAction {
        if !(self.cfg.enabled && packet.req_tx_status && packet.ttl == self.cfg.status_ttl) {
            return CollectorAction::Ignored;
        }
        let Some(backup) = self.backup.get().filter(|b| b.id == status.packet_id) else {
            self.counters.unknown_status += 1;
            return CollectorAction::Ignored;
        };
        if !status.ack && self.cfg.features.retransmit_decision {
            let local_age = now.saturating_since(backup.gen_time);
            if local_age < self.rta_threshold {
                let mut again = backup.clone();
                again.stamps.resends += 1;
                self.counters.resends += 1;
                let again = self.admit(again);
                return CollectorAction::ResendBackup(self.assign_priority(again, Route::FreshFiPath));
            }
        }
        self.counters.feedbacks += 1;
        CollectorAction::SendFeedback
    }
}
