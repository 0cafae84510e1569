//! Scenario configuration: a TOML tree with every duration in µs.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::app::SamplerPolicy;
use crate::channel::ChannelConfig;
use crate::freshfi::{Features, FreshFiConfig};
use crate::sim::{serde_us, SimDuration};
use crate::wnic::CoalescerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NicConfig {
    /// Per-priority FCFS queue depth.
    pub queue_depth: usize,
    /// Attempts per rate in the stock retransmission table.
    pub attempts_per_rate: u32,
    /// Minimum per-attempt success probability for a rate to count as
    /// supported.
    pub support_threshold: f64,
    pub coalescer: CoalescerConfig,
}

impl Default for NicConfig {
    fn default() -> Self {
        NicConfig {
            queue_depth: 50,
            attempts_per_rate: 4,
            support_threshold: 0.5,
            coalescer: CoalescerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PollConfig {
    #[serde(rename = "period_us", with = "serde_us")]
    pub period: SimDuration,
    pub size_bytes: u32,
}

impl Default for PollConfig {
    fn default() -> Self {
        PollConfig {
            period: SimDuration::from_us(300),
            size_bytes: 60,
        }
    }
}

/// Poisson stream of small non-status packets from the source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackgroundTraffic {
    pub rate_per_s: f64,
    pub size_bytes: u32,
}

impl Default for BackgroundTraffic {
    fn default() -> Self {
        BackgroundTraffic {
            rate_per_s: 100.0,
            size_bytes: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub policy: SamplerPolicy,
    #[serde(rename = "compute_us", with = "serde_us")]
    pub compute: SimDuration,
    /// Socket-to-MAC transit of a freshly generated update.
    #[serde(rename = "descent_us", with = "serde_us")]
    pub descent: SimDuration,
    pub status_size_bytes: u32,
    /// TTL carried by updates when the freshness path is off.
    pub neutral_ttl: u8,
    pub poll: PollConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub background: Option<BackgroundTraffic>,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            policy: SamplerPolicy::ZeroWait,
            compute: SimDuration::from_us(5),
            descent: SimDuration::from_us(10),
            status_size_bytes: 150,
            neutral_ttl: 64,
            poll: PollConfig::default(),
            background: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Write the per-delivery NDJSON trace.
    pub trace: bool,
    /// Write the per-event dispatch log.
    pub dispatch_log: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    #[serde(rename = "duration_us", with = "serde_us")]
    pub duration: SimDuration,
    /// Initial stretch excluded from age accounting.
    #[serde(rename = "warmup_us", with = "serde_us")]
    pub warmup: SimDuration,
    pub channel: ChannelConfig,
    pub nic: NicConfig,
    pub freshfi: FreshFiConfig,
    pub app: AppConfig,
    pub output: OutputConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            name: "fresh_fi".into(),
            seed: 1,
            duration: SimDuration::from_secs(600),
            warmup: SimDuration::from_secs(1),
            channel: ChannelConfig::default(),
            nic: NicConfig::default(),
            freshfi: FreshFiConfig::default(),
            app: AppConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldIssue {
    pub field: String,
    pub reason: String,
}

impl fmt::Display for FieldIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.reason)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config:\n{}", list_issues(.0))]
    Invalid(Vec<FieldIssue>),
}

fn list_issues(issues: &[FieldIssue]) -> String {
    issues.iter().map(|i| format!("  {i}")).collect::<Vec<_>>().join("\n")
}

impl ScenarioConfig {
    /// The full freshness stack with a zero-wait sampler.
    pub fn fresh_fi() -> Self {
        ScenarioConfig::default()
    }

    /// Saturating UDP sender over the stock stack.
    pub fn wifi_udp() -> Self {
        let mut c = ScenarioConfig {
            name: "wifi_udp".into(),
            ..ScenarioConfig::default()
        };
        c.freshfi.enabled = false;
        c.app.policy = SamplerPolicy::Saturating;
        c
    }

    /// Periodic sampling into an application LCFS slot drained by polls.
    pub fn wifresh(rate_hz: f64) -> Self {
        let mut c = ScenarioConfig {
            name: format!("wifresh_{}khz", rate_hz / 1e3),
            ..ScenarioConfig::default()
        };
        c.freshfi.enabled = false;
        c.app.policy = SamplerPolicy::Wifresh { rate_hz };
        c
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let c: ScenarioConfig = toml::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let s = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario config always serializes")
    }

    /// Collects every problem instead of stopping at the first.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut issues = Vec::new();
        let mut bad = |field: &str, reason: String| {
            issues.push(FieldIssue {
                field: field.to_string(),
                reason,
            })
        };
        if self.duration.is_zero() {
            bad("duration_us", "must be positive".into());
        }
        if let Err(e) = self.channel.validate() {
            bad("channel", e.to_string());
        }
        if self.nic.queue_depth == 0 {
            bad("nic.queue_depth", "must be at least 1".into());
        }
        if self.nic.attempts_per_rate == 0 {
            bad("nic.attempts_per_rate", "must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.nic.support_threshold) {
            bad("nic.support_threshold", "must lie in [0, 1]".into());
        }
        let co = &self.nic.coalescer;
        if co.enabled && (co.threshold_low.is_zero() || co.threshold_high < co.threshold_low) {
            bad(
                "nic.coalescer",
                "need 0 < threshold_low_us <= threshold_high_us".into(),
            );
        }
        if let Err(e) = self.freshfi.validate() {
            bad("freshfi", e.to_string());
        }
        if let Err(e) = self.app.policy.validate() {
            bad("app.policy", e.to_string());
        }
        if self.app.status_size_bytes == 0 {
            bad("app.status_size_bytes", "must be positive".into());
        }
        if self.app.neutral_ttl == 0 {
            bad("app.neutral_ttl", "must lie in [1, 255]".into());
        }
        if self.freshfi.enabled && self.app.neutral_ttl == self.freshfi.status_ttl {
            bad("app.neutral_ttl", "must differ from freshfi.status_ttl".into());
        }
        if self.app.poll.period.is_zero() || self.app.poll.size_bytes == 0 {
            bad("app.poll", "period and size must be positive".into());
        }
        if let Some(bg) = self.app.background {
            if !(bg.rate_per_s.is_finite() && bg.rate_per_s > 0.0) || bg.size_bytes == 0 {
                bad("app.background", "rate and size must be positive".into());
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(issues))
        }
    }

    pub fn features(&self) -> Features {
        self.freshfi.features
    }
}
