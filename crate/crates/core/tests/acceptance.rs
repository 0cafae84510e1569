//! Acceptance run. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use freshfi_sim::aoi::{analytic_average_aoi, empirical_average_aoi, slotted_pairs, AoiSeries, DeliveryRecord};
use freshfi_sim::harness::suites::{self, baseline_variants, SuiteOptions, RTA_WITHOUT_PATCH, RTA_WITH_PATCH};
use freshfi_sim::harness::{run_scenario, write_outputs, ScenarioConfig, ScenarioReport};
use freshfi_sim::sim::{SimDuration, SimTime};
use freshfi_sim::wnic::{coalesce_arrivals, CoalescerConfig};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
/// Simulated length of each table run. Orderings settle within a few
/// seconds; 30 s keeps seed-to-seed noise well under the margins below.
const TABLE_RUN: SimDuration = SimDuration::from_secs(30);

const ORACLE_CASES: usize = 1000;
const ORACLE_BUDGET: Duration = Duration::from_secs(10);
const FORMULA_REL_TOL: f64 = 1e-12;
const INTEGRAL_REL_TOL: f64 = 1e-9;

const LONG_RUN: SimDuration = SimDuration::from_secs(600);
const LONG_RUN_BUDGET: Duration = Duration::from_secs(60);

const MIN_UDP_RATIO: f64 = 10.0;
const MAX_WIFRESH_SPREAD: f64 = 0.35;

const MAX_QUEUE_MANAGER_PENALTY: f64 = 0.10;
const MIN_NO_TUNNEL_RATIO: f64 = 5.0;

const RTA_SEEDS: [u64; 2] = [1, 2];
const RTA_RUN: SimDuration = SimDuration::from_secs(40);
const MIN_RTA_CYCLES: usize = 100_000;
const RTA_MEAN_REL_TOL: f64 = 0.05;
const RTA_TAIL_TOL_WITH_PATCH: f64 = 0.015;
const RTA_TAIL_TOL_WITHOUT_PATCH: f64 = 0.025;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

// Age averaged slot by slot from the delivery sequence.
fn brute_slotted(pairs: &[(u64, u64)]) -> f64 {
    let mut sum = 0u128;
    let mut slots = 0u128;
    for &(s, y) in pairs {
        for age in s..s + y {
            sum += u128::from(age);
            slots += 1;
        }
    }
    sum as f64 / slots as f64
}

// Midpoint sum over 1 ns cells.
fn grid_average(records: &[DeliveryRecord], start: u64, end: u64, initial: u64) -> f64 {
    let mut held = initial;
    let mut next = 0;
    let mut area = 0.0;
    for t in start..end {
        while next < records.len() && records[next].deliver.as_ns() <= t {
            held = records[next].gen.as_ns();
            next += 1;
        }
        area += (t - held) as f64 + 0.5;
    }
    area / (end - start) as f64
}

fn criterion_oracles() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0AC1E);
    let slot = SimDuration::from_us(1);
    let mut worst_formula = 0.0f64;
    for _ in 0..ORACLE_CASES {
        let n = rng.random_range(2..=40);
        // Deliveries built from Y gaps, generation times from S.
        let mut deliver = rng.random_range(20..100u64);
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let s = rng.random_range(1..=20u64);
            records.push((deliver - s, deliver));
            deliver += rng.random_range(1..=50u64);
        }
        let recs: Vec<DeliveryRecord> = records
            .iter()
            .map(|&(g, d)| DeliveryRecord::new(SimTime::from_us(g), SimTime::from_us(d)))
            .collect();
        let pairs = slotted_pairs(&recs, slot).expect("slot is positive");
        let got = analytic_average_aoi(&pairs, slot).expect("pairs are valid") / 1e3;
        let want = brute_slotted(&pairs);
        worst_formula = worst_formula.max(rel(got, want));
    }
    let mut worst_integral = 0.0f64;
    for _ in 0..ORACLE_CASES {
        let start = rng.random_range(0..500u64);
        let initial = rng.random_range(0..=start);
        let mut gen = initial;
        let mut deliver = start;
        let mut records = Vec::new();
        let n = rng.random_range(2..=30);
        for _ in 0..n {
            gen += rng.random_range(1..400u64);
            deliver = deliver.max(gen) + rng.random_range(1..400u64);
            records.push(DeliveryRecord::new(SimTime::from_ns(gen), SimTime::from_ns(deliver)));
        }
        let end = deliver + rng.random_range(0..400u64);
        let series = AoiSeries::with_initial_gen(
            records.clone(),
            SimTime::from_ns(start),
            SimTime::from_ns(end),
            SimTime::from_ns(initial),
        )
        .expect("generated trace is valid");
        let got = empirical_average_aoi(&series).expect("two or more deliveries");
        let want = grid_average(&records, start, end, initial);
        worst_integral = worst_integral.max(rel(got, want));
    }
    let elapsed = t0.elapsed();
    Outcome::new(
        worst_formula <= FORMULA_REL_TOL && worst_integral <= INTEGRAL_REL_TOL && elapsed < ORACLE_BUDGET,
        format!(
            "{ORACLE_CASES}+{ORACLE_CASES} cases, worst rel err formula {worst_formula:.1e} (tol {FORMULA_REL_TOL:.0e}), integral {worst_integral:.1e} (tol {INTEGRAL_REL_TOL:.0e}), {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

struct BaselineRuns {
    keys: Vec<String>,
    // reports[variant][seed]
    reports: Vec<Vec<ScenarioReport>>,
    sawtooth: Result<usize, String>,
}

fn baseline_runs() -> BaselineRuns {
    let variants = baseline_variants(&ScenarioConfig::default());
    let mut keys = Vec::new();
    let mut reports = Vec::new();
    let mut sawtooth = Ok(0);
    for v in variants {
        let mut row = Vec::new();
        for seed in SEEDS {
            let mut cfg = v.config.clone();
            cfg.seed = seed;
            cfg.duration = TABLE_RUN;
            let out = run_scenario(&cfg).expect("baseline run");
            let reread = common::reparse(&out.trace);
            sawtooth = sawtooth.and_then(|n| {
                common::check_sawtooth(&reread)
                    .map(|m| n + m)
                    .map_err(|e| format!("{} seed {seed}: {e}", v.key))
            });
            row.push(out.report);
        }
        keys.push(v.key);
        reports.push(row);
    }
    BaselineRuns { keys, reports, sawtooth }
}

fn criterion_sawtooth(b: &BaselineRuns) -> Outcome {
    match &b.sawtooth {
        Ok(n) => Outcome::new(
            true,
            format!("{} traces, {n} segments checked", b.keys.len() * SEEDS.len()),
        ),
        Err(e) => Outcome::new(false, e.clone()),
    }
}

fn criterion_one_in_flight() -> Outcome {
    let mut cfg = ScenarioConfig::fresh_fi();
    cfg.duration = LONG_RUN;
    let t0 = Instant::now();
    let out = run_scenario(&cfg).expect("long run");
    let elapsed = t0.elapsed();
    let r = &out.report;
    Outcome::new(
        r.max_source_status_in_flight <= 1 && r.conservation_ok && elapsed < LONG_RUN_BUDGET,
        format!(
            "600 s, {} events, max held {}, conservation {}, {:.1}s",
            r.events_dispatched,
            r.max_source_status_in_flight,
            r.conservation_ok,
            elapsed.as_secs_f64()
        ),
    )
}

fn aoi(r: &ScenarioReport) -> f64 {
    r.avg_aoi_ms().unwrap_or(f64::NAN)
}

fn criterion_table2(b: &BaselineRuns) -> Outcome {
    let idx = |k: &str| b.keys.iter().position(|x| x == k).expect("variant present");
    let (ff, udp) = (idx("fresh_fi"), idx("wifi_udp"));
    let wifresh: Vec<usize> = (0..b.keys.len()).filter(|&i| b.keys[i].starts_with("wifresh")).collect();
    let mut ordering = true;
    let mut min_ratio = f64::INFINITY;
    let mut max_spread = 0.0f64;
    for s in 0..SEEDS.len() {
        let f = aoi(&b.reports[ff][s]);
        let u = aoi(&b.reports[udp][s]);
        let w: Vec<f64> = wifresh.iter().map(|&i| aoi(&b.reports[i][s])).collect();
        ordering &= w.iter().all(|&x| f < x && x < u);
        min_ratio = min_ratio.min(u / f);
        let (lo, hi) = w.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        max_spread = max_spread.max((hi - lo) / lo);
    }
    let mean = |i: usize| b.reports[i].iter().map(aoi).sum::<f64>() / SEEDS.len() as f64;
    Outcome::new(
        ordering && min_ratio >= MIN_UDP_RATIO && max_spread <= MAX_WIFRESH_SPREAD,
        format!(
            "means ms: fresh_fi {:.3}, wifresh {}, wifi_udp {:.2}; ordering on every seed {ordering}, min udp ratio {min_ratio:.1} (>= {MIN_UDP_RATIO}), max wifresh spread {:.1}% (<= {:.0}%)",
            mean(ff),
            wifresh.iter().map(|&i| format!("{:.3}", mean(i))).collect::<Vec<_>>().join("/"),
            mean(udp),
            max_spread * 100.0,
            MAX_WIFRESH_SPREAD * 100.0
        ),
    )
}

fn criterion_table3() -> Outcome {
    let opts = SuiteOptions::new(SEEDS, Some(TABLE_RUN));
    let t = suites::run_ablations(&ScenarioConfig::default(), &opts).expect("ablation runs");
    let m = |k: &str| t.get(k).expect("variant present").mean_aoi_ms();
    let full = m("full");
    let a = m("default_retx") >= full;
    let penalty = m("no_queue_manager") / m("full_background") - 1.0;
    let b = penalty <= MAX_QUEUE_MANAGER_PENALTY;
    let ratio = m("no_tunnel") / full;
    let c = ratio >= MIN_NO_TUNNEL_RATIO;
    let d_on = m("fixed_wait_300us") < full;
    let d_off = m("fixed_wait_300us_no_coalescer") >= m("full_no_coalescer");
    Outcome::new(
        a && b && c && d_on && d_off,
        format!(
            "(a) default_retx {:.3} >= full {full:.3}: {a}; (b) queue manager penalty {:.2}% (<= {:.0}%): {b}; (c) no_tunnel ratio {ratio:.1} (>= {MIN_NO_TUNNEL_RATIO}): {c}; (d) fixed wait {:.3} < {full:.3}: {d_on}, coalescer off {:.3} >= {:.3}: {d_off}",
            m("default_retx"),
            penalty * 100.0,
            MAX_QUEUE_MANAGER_PENALTY * 100.0,
            m("fixed_wait_300us"),
            m("fixed_wait_300us_no_coalescer"),
            m("full_no_coalescer"),
        ),
    )
}

fn criterion_rta() -> Outcome {
    let opts = SuiteOptions::new(RTA_SEEDS, Some(RTA_RUN));
    let rows = suites::rta_calibration(&ScenarioConfig::default(), &opts).expect("rta runs");
    let mut pass = true;
    let mut parts = Vec::new();
    for r in &rows {
        let tail_tol = if r.target == RTA_WITH_PATCH {
            RTA_TAIL_TOL_WITH_PATCH
        } else {
            assert_eq!(r.target, RTA_WITHOUT_PATCH);
            RTA_TAIL_TOL_WITHOUT_PATCH
        };
        let mean_err = rel(r.measured.mean_us, r.target.mean_us);
        let tail_err = (r.measured.frac_above - r.target.frac_above).abs();
        let ok = r.measured.count >= MIN_RTA_CYCLES && mean_err <= RTA_MEAN_REL_TOL && tail_err <= tail_tol;
        pass &= ok;
        parts.push(format!(
            "{}: n={} mean {:.2}us vs {:.2} ({:+.1}%), >100us {:.2}% vs {:.2}% ({:+.2}pp, tol {:.1}pp)",
            r.key,
            r.measured.count,
            r.measured.mean_us,
            r.target.mean_us,
            (r.measured.mean_us / r.target.mean_us - 1.0) * 100.0,
            r.measured.frac_above * 100.0,
            r.target.frac_above * 100.0,
            (r.measured.frac_above - r.target.frac_above) * 100.0,
            tail_tol * 100.0
        ));
    }
    Outcome::new(pass, parts.join("; "))
}

fn write_run(cfg: &ScenarioConfig, dir: &Path) {
    let out = run_scenario(cfg).expect("determinism run");
    write_outputs(dir, &out, true).expect("outputs written");
}

fn criterion_determinism() -> Outcome {
    let mut pass = true;
    let mut checked = Vec::new();
    let mut configs = vec![ScenarioConfig::fresh_fi(), ScenarioConfig::wifresh(5_000.0), ScenarioConfig::wifi_udp()];
    configs[0].app.background = Some(Default::default());
    for mut cfg in configs {
        cfg.seed = 7;
        cfg.duration = SimDuration::from_secs(3);
        cfg.output.dispatch_log = true;
        let (a, b) = (tempfile::tempdir().expect("tempdir"), tempfile::tempdir().expect("tempdir"));
        write_run(&cfg, a.path());
        write_run(&cfg, b.path());
        for file in ["report.json", "trace.ndjson", "dispatch.ndjson"] {
            let x = std::fs::read(a.path().join(file)).expect("first file");
            let y = std::fs::read(b.path().join(file)).expect("second file");
            pass &= x == y && !x.is_empty();
        }
        checked.push(cfg.name.clone());
    }
    Outcome::new(
        pass,
        format!("{} scenarios, report/trace/dispatch files byte-identical: {pass}", checked.join(", ")),
    )
}

fn criterion_coalescer() -> Outcome {
    let cfg = CoalescerConfig::default();
    let stream = |period_us: u64| -> Vec<SimTime> { (0..70).map(|i| SimTime::from_us(i * period_us)).collect() };

    // 300 us gaps never leave the silence window open long enough, so each
    // burst runs to the 2000 us cap: arrivals 0..=1800 flush at 2000, the
    // next burst opens at 2100.
    let fast = coalesce_arrivals(cfg, &stream(300));
    let fast_ok = fast.iter().enumerate().all(|(i, &(arr, del))| {
        let burst = i as u64 / 7;
        del == SimTime::from_us(burst * 2_100 + 2_000) && arr <= del
    });
    let fast_flushes = {
        let mut d: Vec<SimTime> = fast.iter().map(|p| p.1).collect();
        d.dedup();
        d.len()
    };

    let slow = coalesce_arrivals(cfg, &stream(600));
    let slow_ok = slow.iter().all(|&(arr, del)| del - arr == SimDuration::from_us(500));
    Outcome::new(
        fast_ok && slow_ok && fast_flushes == 10,
        format!(
            "300us stream: {fast_flushes} flushes at the 2000us cap: {fast_ok}; 600us stream: every delay exactly 500us: {slow_ok}"
        ),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(u8, &str, Outcome)> = Vec::new();
    results.push((1, "age oracles", criterion_oracles()));
    let baselines = baseline_runs();
    results.push((2, "sawtooth over stack comparison traces", criterion_sawtooth(&baselines)));
    results.push((3, "one status update in flight", criterion_one_in_flight()));
    results.push((4, "stack comparison ordering and ratios", criterion_table2(&baselines)));
    results.push((5, "feature ablations", criterion_table3()));
    results.push((6, "request-to-arrival calibration", criterion_rta()));
    results.push((7, "determinism", criterion_determinism()));
    results.push((8, "receive coalescing", criterion_coalescer()));

    let mut failed = 0;
    for (n, name, o) in &results {
        let mark = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {n} {mark} {name}: {}", o.detail);
        failed += usize::from(!o.pass);
    }
    if failed == 0 {
        println!("acceptance: all {} criteria passed", results.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} of {} criteria failed", results.len());
        ExitCode::FAILURE
    }
}
