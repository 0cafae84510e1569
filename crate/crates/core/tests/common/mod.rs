#![allow(dead_code)]

use freshfi_sim::aoi::{instantaneous_aoi, AoiSeries};
use freshfi_sim::channel::RateEntry;
use freshfi_sim::freshfi::TunnelLatencyModel;
use freshfi_sim::harness::{ScenarioConfig, Trace};
use freshfi_sim::sim::{SimDuration, SimTime};

/// Fresh-Fi on a channel with no loss, no neighbours, no backoff and a fixed
/// tunnel latency, so every cycle can be worked out by hand.
pub fn loss_free(tunnel_us: f64) -> ScenarioConfig {
    let mut c = ScenarioConfig::fresh_fi();
    c.channel.background_busy = None;
    c.channel.cw_min = 0;
    c.channel.rate_table = vec![RateEntry {
        rate_mbps: 54.0,
        success_prob: 1.0,
    }];
    c.freshfi.tunnel_latency = TunnelLatencyModel::Constant { latency_us: tunnel_us };
    c.duration = SimDuration::from_secs(2);
    c.warmup = SimDuration::from_secs(1);
    c
}

/// Checks the sawtooth over the whole run: age never negative, grows at
/// slope one between deliveries, and drops only at delivery instants.
pub fn check_sawtooth(trace: &Trace) -> Result<usize, String> {
    let records = trace.records();
    let end = SimTime::from_ns(trace.summary.duration_ns);
    let series = AoiSeries::new(records.clone(), SimTime::ZERO, end).map_err(|e| e.to_string())?;
    let deliveries: std::collections::HashSet<u64> = records.iter().map(|r| r.deliver.as_ns()).collect();
    let mut prev: Option<(SimTime, SimTime, SimTime)> = None;
    let mut segments = 0;
    for (from, to, gen) in series.segments() {
        segments += 1;
        if from < gen {
            return Err(format!("negative age at {}ns", from.as_ns()));
        }
        if let Some((_, pto, pgen)) = prev {
            if pto != from {
                return Err(format!("gap between segments at {}ns", from.as_ns()));
            }
            if !deliveries.contains(&from.as_ns()) {
                return Err(format!("age reset at {}ns without a delivery", from.as_ns()));
            }
            if gen <= pgen {
                return Err(format!("age did not drop at {}ns", from.as_ns()));
            }
        }
        let a0 = instantaneous_aoi(&series, from).map_err(|e| e.to_string())?;
        if a0 != from - gen {
            return Err(format!("age at {}ns is {:?}", from.as_ns(), a0));
        }
        if to.as_ns() > from.as_ns() + 1 {
            let last = SimTime::from_ns(to.as_ns() - 1);
            let a1 = instantaneous_aoi(&series, last).map_err(|e| e.to_string())?;
            if a1 - a0 != last - from {
                return Err(format!("slope is not one on [{}, {})ns", from.as_ns(), to.as_ns()));
            }
        }
        prev = Some((from, to, gen));
    }
    Ok(segments)
}

/// Round-trips a trace through NDJSON.
pub fn reparse(trace: &Trace) -> Trace {
    let mut buf = Vec::new();
    trace.write_ndjson(&mut buf).expect("trace writes");
    Trace::read_ndjson(buf.as_slice()).expect("trace reads")
}
