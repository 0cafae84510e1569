//! Comparison suites: stack baselines, feature ablations and the RTA
//! calibration table. Every variant is derived from one base config so the
//! channel and NIC calibration is shared.

use std::fmt::Write as _;

use crate::aoi::SummaryStats;
use crate::app::SamplerPolicy;
use crate::freshfi::TunnelLatencyModel;
use crate::harness::config::{BackgroundTraffic, ScenarioConfig};
use crate::harness::report::ScenarioReport;
use crate::harness::world::{run_scenario, RunError};
use crate::sim::SimDuration;

pub const WIFRESH_RATES_HZ: [f64; 3] = [5_000.0, 6_000.0, 7_000.0];

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub seeds: Vec<u64>,
    /// Overrides the base duration when set.
    pub duration: Option<SimDuration>,
}

impl SuiteOptions {
    pub fn new(seeds: impl IntoIterator<Item = u64>, duration: Option<SimDuration>) -> Self {
        SuiteOptions {
            seeds: seeds.into_iter().collect(),
            duration,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Variant {
    pub key: String,
    pub label: String,
    pub config: ScenarioConfig,
}

fn variant(key: &str, label: &str, base: &ScenarioConfig, edit: impl FnOnce(&mut ScenarioConfig)) -> Variant {
    let mut config = base.clone();
    config.name = key.to_string();
    edit(&mut config);
    Variant {
        key: key.to_string(),
        label: label.to_string(),
        config,
    }
}

fn as_fresh_fi(c: &mut ScenarioConfig) {
    c.freshfi.enabled = true;
    c.app.policy = SamplerPolicy::ZeroWait;
}

pub fn baseline_variants(base: &ScenarioConfig) -> Vec<Variant> {
    let mut v = vec![
        variant("fresh_fi", "Fresh-Fi", base, as_fresh_fi),
        variant("wifi_udp", "WiFi UDP", base, |c| {
            c.freshfi.enabled = false;
            c.app.policy = SamplerPolicy::Saturating;
        }),
    ];
    for rate_hz in WIFRESH_RATES_HZ {
        let key = format!("wifresh_{}khz", rate_hz / 1e3);
        let label = format!("WiFresh APP R={}kHz", rate_hz / 1e3);
        v.push(variant(&key, &label, base, |c| {
            c.freshfi.enabled = false;
            c.app.policy = SamplerPolicy::Wifresh { rate_hz };
        }));
    }
    v
}

pub fn ablation_variants(base: &ScenarioConfig) -> Vec<Variant> {
    let sparse = |c: &mut ScenarioConfig| {
        as_fresh_fi(c);
        c.app.background.get_or_insert_with(BackgroundTraffic::default);
    };
    vec![
        variant("full", "Fresh-Fi", base, as_fresh_fi),
        variant("default_retx", "Fresh-Fi with default WNIC re-transmissions", base, |c| {
            as_fresh_fi(c);
            c.freshfi.features.single_attempt_table = false;
        }),
        variant("full_background", "Fresh-Fi with sparse background traffic", base, sparse),
        variant("no_queue_manager", "Fresh-Fi without WNIC queue manager", base, |c| {
            sparse(c);
            c.freshfi.features.queue_manager = false;
        }),
        variant("no_tunnel", "Fresh-Fi without cross-layer tunnel", base, |c| {
            as_fresh_fi(c);
            c.freshfi.features.tunnel = false;
            c.app.policy = SamplerPolicy::Saturating;
        }),
        variant("fixed_wait_300us", "Fresh-Fi with 300us waiting", base, |c| {
            as_fresh_fi(c);
            c.app.policy = SamplerPolicy::FixedWait {
                delay: SimDuration::from_us(300),
            };
        }),
        variant("full_no_coalescer", "Fresh-Fi with receive coalescing off", base, |c| {
            as_fresh_fi(c);
            c.nic.coalescer.enabled = false;
        }),
        variant("fixed_wait_300us_no_coalescer", "Fresh-Fi with 300us waiting and receive coalescing off", base, |c| {
            as_fresh_fi(c);
            c.nic.coalescer.enabled = false;
            c.app.policy = SamplerPolicy::FixedWait {
                delay: SimDuration::from_us(300),
            };
        }),
    ]
}

#[derive(Debug, Clone)]
pub struct VariantRun {
    pub key: String,
    pub label: String,
    pub reports: Vec<ScenarioReport>,
}

impl VariantRun {
    /// Per-seed continuous average age in ms; NaN where a run had too few
    /// deliveries.
    pub fn aoi_ms(&self) -> Vec<f64> {
        self.reports.iter().map(|r| r.avg_aoi_ms().unwrap_or(f64::NAN)).collect()
    }

    pub fn mean_aoi_ms(&self) -> f64 {
        let v = self.aoi_ms();
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct SuiteTable {
    pub title: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<VariantRun>,
}

impl SuiteTable {
    pub fn get(&self, key: &str) -> Option<&VariantRun> {
        self.rows.iter().find(|r| r.key == key)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,label,avg_aoi_ms");
        for seed in &self.seeds {
            let _ = write!(s, ",seed_{seed}_ms");
        }
        s.push('\n');
        for row in &self.rows {
            let _ = write!(s, "{},{},{:.4}", row.key, row.label, row.mean_aoi_ms());
            for v in row.aoi_ms() {
                let _ = write!(s, ",{v:.4}");
            }
            s.push('\n');
        }
        s
    }
}

pub fn run_variants(title: &str, variants: Vec<Variant>, opts: &SuiteOptions) -> Result<SuiteTable, RunError> {
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let mut reports = Vec::with_capacity(opts.seeds.len());
        for &seed in &opts.seeds {
            let mut cfg = v.config.clone();
            cfg.seed = seed;
            if let Some(d) = opts.duration {
                cfg.duration = d;
            }
            cfg.output.dispatch_log = false;
            reports.push(run_scenario(&cfg)?.report);
        }
        rows.push(VariantRun {
            key: v.key,
            label: v.label,
            reports,
        });
    }
    Ok(SuiteTable {
        title: title.to_string(),
        seeds: opts.seeds.clone(),
        rows,
    })
}

pub fn compare_baselines(base: &ScenarioConfig, opts: &SuiteOptions) -> Result<SuiteTable, RunError> {
    run_variants("Average AoI by protocol stack", baseline_variants(base), opts)
}

pub fn run_ablations(base: &ScenarioConfig, opts: &SuiteOptions) -> Result<SuiteTable, RunError> {
    run_variants("Average AoI by Fresh-Fi variant", ablation_variants(base), opts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RtaTarget {
    pub mean_us: f64,
    pub std_us: f64,
    pub frac_above: f64,
}

#[derive(Debug, Clone)]
pub struct RtaRow {
    pub key: &'static str,
    pub target: RtaTarget,
    pub measured: SummaryStats,
}

pub const RTA_WITH_PATCH: RtaTarget = RtaTarget {
    mean_us: 38.30,
    std_us: 71.52,
    frac_above: 0.0133,
};
pub const RTA_WITHOUT_PATCH: RtaTarget = RtaTarget {
    mean_us: 58.17,
    std_us: 120.40,
    frac_above: 0.0665,
};

/// Runs the zero-wait loop under both tunnel calibrations and measures the
/// request-to-arrival interval. Seeds are pooled per calibration.
pub fn rta_calibration(base: &ScenarioConfig, opts: &SuiteOptions) -> Result<Vec<RtaRow>, RunError> {
    let cases = [
        ("with_patch", TunnelLatencyModel::rta_with_patch(), RTA_WITH_PATCH),
        ("without_patch", TunnelLatencyModel::rta_without_patch(), RTA_WITHOUT_PATCH),
    ];
    let mut rows = Vec::new();
    for (key, model, target) in cases {
        let v = variant(key, key, base, |c| {
            as_fresh_fi(c);
            c.freshfi.tunnel_latency = model;
        });
        let table = run_variants(key, vec![v], opts)?;
        let mut pooled = Vec::new();
        for r in &table.rows[0].reports {
            let s = r.rta.ok_or_else(|| RunError::Invariant(format!("{key}: no RTA samples")))?;
            pooled.push(s);
        }
        rows.push(RtaRow {
            key,
            target,
            measured: pool_stats(&pooled),
        });
    }
    Ok(rows)
}

/// Combines per-run population statistics into one.
fn pool_stats(parts: &[SummaryStats]) -> SummaryStats {
    let n: f64 = parts.iter().map(|s| s.count as f64).sum();
    let mean = parts.iter().map(|s| s.mean_us * s.count as f64).sum::<f64>() / n;
    let second = parts
        .iter()
        .map(|s| (s.std_us * s.std_us + s.mean_us * s.mean_us) * s.count as f64)
        .sum::<f64>()
        / n;
    let above = parts.iter().map(|s| s.frac_above * s.count as f64).sum::<f64>() / n;
    SummaryStats {
        count: n as usize,
        mean_us: mean,
        std_us: (second - mean * mean).max(0.0).sqrt(),
        threshold_us: parts.first().map_or(100.0, |s| s.threshold_us),
        frac_above: above,
    }
}

pub fn rta_csv(rows: &[RtaRow]) -> String {
    let mut s = String::from(
        "calibration,target_mean_us,measured_mean_us,target_std_us,measured_std_us,target_pct_above_100us,measured_pct_above_100us,samples\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2},{}",
            r.key,
            r.target.mean_us,
            r.measured.mean_us,
            r.target.std_us,
            r.measured.std_us,
            r.target.frac_above * 100.0,
            r.measured.frac_above * 100.0,
            r.measured.count
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooled_stats_match_direct() {
        use crate::aoi::rta_statistics;
        let a: Vec<SimDuration> = [10, 20, 30].map(SimDuration::from_us).to_vec();
        let b: Vec<SimDuration> = [40, 150].map(SimDuration::from_us).to_vec();
        let th = SimDuration::from_us(100);
        let pooled = pool_stats(&[rta_statistics(&a, th).unwrap(), rta_statistics(&b, th).unwrap()]);
        let all: Vec<SimDuration> = a.iter().chain(&b).copied().collect();
        let direct = rta_statistics(&all, th).unwrap();
        assert_eq!(pooled.count, direct.count);
        assert!((pooled.mean_us - direct.mean_us).abs() < 1e-9);
        assert!((pooled.std_us - direct.std_us).abs() < 1e-9);
        assert!((pooled.frac_above - direct.frac_above).abs() < 1e-12);
    }

    #[test]
    fn variants_touch_only_their_fields() {
        let base = ScenarioConfig::fresh_fi();
        let v = ablation_variants(&base);
        let full = &v[0].config;
        let retx = &v[1].config;
        assert!(!retx.freshfi.features.single_attempt_table);
        assert_eq!(retx.freshfi.features.queue_manager, full.freshfi.features.queue_manager);
        assert_eq!(retx.channel, full.channel);
        let nqm = v.iter().find(|v| v.key == "no_queue_manager").unwrap();
        assert!(nqm.config.app.background.is_some());
        let b = baseline_variants(&base);
        assert_eq!(b.len(), 5);
        assert!(b.iter().all(|v| v.config.channel == base.channel && v.config.nic == base.nic));
    }
}
