//! Age-of-information analytics over delivery records.
//!
//! All averages are returned in nanoseconds as `f64`. Continuous integrals
//! are accumulated exactly in `u128` before the single final division.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{SimDuration, SimTime};

/// One update handed to the receiving application.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryRecord {
    #[serde(rename = "gen_ns")]
    pub gen: SimTime,
    #[serde(rename = "deliver_ns")]
    pub deliver: SimTime,
}

impl DeliveryRecord {
    pub fn new(gen: SimTime, deliver: SimTime) -> Self {
        DeliveryRecord { gen, deliver }
    }

    /// Age of this update at the moment it is delivered.
    pub fn system_time(&self) -> SimDuration {
        self.deliver - self.gen
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AoiError {
    #[error("insufficient deliveries: {count} record(s), need at least 2")]
    InsufficientDeliveries { count: usize },
    #[error("time {t_ns}ns lies outside the horizon [{start_ns}, {end_ns}]ns")]
    OutsideHorizon { t_ns: u64, start_ns: u64, end_ns: u64 },
    #[error("empty horizon")]
    EmptyHorizon,
    #[error("record {index}: {reason}")]
    BadRecord { index: usize, reason: &'static str },
    #[error("initial generation epoch must not exceed the horizon start or the first generation")]
    BadInitialEpoch,
    #[error("no samples")]
    EmptyInput,
    #[error("slot width must be positive")]
    ZeroSlot,
}

/// Delivery records over an accounting horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct AoiSeries {
    records: Vec<DeliveryRecord>,
    t_start: SimTime,
    t_end: SimTime,
    initial_gen: SimTime,
}

impl AoiSeries {
    /// Age before the first record is measured from `t_start`.
    pub fn new(records: Vec<DeliveryRecord>, t_start: SimTime, t_end: SimTime) -> Result<Self, AoiError> {
        Self::with_initial_gen(records, t_start, t_end, t_start)
    }

    /// `initial_gen` is the generation time of whatever the receiver held at
    /// `t_start`, typically the last update delivered before the horizon.
    pub fn with_initial_gen(
        records: Vec<DeliveryRecord>,
        t_start: SimTime,
        t_end: SimTime,
        initial_gen: SimTime,
    ) -> Result<Self, AoiError> {
        if t_end <= t_start {
            return Err(AoiError::EmptyHorizon);
        }
        for (i, r) in records.iter().enumerate() {
            if r.deliver <= r.gen {
                return Err(AoiError::BadRecord { index: i, reason: "delivery not after generation" });
            }
            if r.deliver < t_start || r.deliver > t_end {
                return Err(AoiError::BadRecord { index: i, reason: "delivery outside horizon" });
            }
            if i > 0 {
                let prev = records[i - 1];
                if r.deliver < prev.deliver {
                    return Err(AoiError::BadRecord { index: i, reason: "deliveries out of order" });
                }
                if r.gen <= prev.gen {
                    return Err(AoiError::BadRecord { index: i, reason: "generation times not increasing" });
                }
            }
        }
        if initial_gen > t_start || records.first().is_some_and(|r| r.gen < initial_gen) {
            return Err(AoiError::BadInitialEpoch);
        }
        Ok(AoiSeries { records, t_start, t_end, initial_gen })
    }

    pub fn records(&self) -> &[DeliveryRecord] {
        &self.records
    }

    pub fn horizon(&self) -> (SimTime, SimTime) {
        (self.t_start, self.t_end)
    }

    pub fn initial_gen(&self) -> SimTime {
        self.initial_gen
    }

    /// Generation time of the freshest update held at `t` (deliveries at
    /// exactly `t` count).
    fn held_gen(&self, t: SimTime) -> SimTime {
        let n = self.records.partition_point(|r| r.deliver <= t);
        if n == 0 {
            self.initial_gen
        } else {
            self.records[n - 1].gen
        }
    }

    /// Piecewise-linear segments `(from, to, gen)` covering the horizon.
    pub fn segments(&self) -> impl Iterator<Item = (SimTime, SimTime, SimTime)> + '_ {
        let mut cursor = self.t_start;
        let mut gen = self.initial_gen;
        let mut idx = 0;
        std::iter::from_fn(move || {
            while idx < self.records.len() && self.records[idx].deliver <= cursor {
                gen = self.records[idx].gen;
                idx += 1;
            }
            if cursor >= self.t_end {
                return None;
            }
            let to = self.records.get(idx).map_or(self.t_end, |r| r.deliver);
            let seg = (cursor, to, gen);
            cursor = to;
            Some(seg)
        })
    }
}

/// Age at `t`, right-continuous at delivery instants.
pub fn instantaneous_aoi(series: &AoiSeries, t: SimTime) -> Result<SimDuration, AoiError> {
    if t < series.t_start || t > series.t_end {
        return Err(AoiError::OutsideHorizon {
            t_ns: t.as_ns(),
            start_ns: series.t_start.as_ns(),
            end_ns: series.t_end.as_ns(),
        });
    }
    Ok(t - series.held_gen(t))
}

/// Exact time average of the age over the horizon, in ns.
pub fn empirical_average_aoi(series: &AoiSeries) -> Result<f64, AoiError> {
    if series.records.len() < 2 {
        return Err(AoiError::InsufficientDeliveries { count: series.records.len() });
    }
    // Twice the area under the sawtooth.
    let mut area2: u128 = 0;
    for (from, to, gen) in series.segments() {
        let a = u128::from((from - gen).as_ns());
        let b = u128::from((to - gen).as_ns());
        area2 += b * b - a * a;
    }
    let span = (series.t_end - series.t_start).as_ns();
    Ok(area2 as f64 / (2.0 * span as f64))
}

/// Quantizes a record stream to `(S_{i-1}, Y_i)` pairs in whole slots, where
/// `S` is the system time of an update and `Y` the gap to the next delivery.
pub fn slotted_pairs(records: &[DeliveryRecord], slot: SimDuration) -> Result<Vec<(u64, u64)>, AoiError> {
    if slot.is_zero() {
        return Err(AoiError::ZeroSlot);
    }
    let q = |t: SimTime| t.as_ns() / slot.as_ns();
    Ok(records
        .windows(2)
        .map(|w| (q(w[0].deliver) - q(w[0].gen), q(w[1].deliver) - q(w[0].deliver)))
        .collect())
}

/// Slotted closed form `(E[S_{i-1} Y_i] + (E[Y^2] - E[Y]) / 2) / E[Y]`,
/// evaluated on slot counts and scaled back to ns.
pub fn analytic_average_aoi(pairs: &[(u64, u64)], slot: SimDuration) -> Result<f64, AoiError> {
    if pairs.is_empty() {
        return Err(AoiError::EmptyInput);
    }
    if slot.is_zero() {
        return Err(AoiError::ZeroSlot);
    }
    let n = pairs.len() as f64;
    let (mut sy, mut y, mut y2) = (0u128, 0u128, 0u128);
    for &(s, yi) in pairs {
        sy += u128::from(s) * u128::from(yi);
        y += u128::from(yi);
        y2 += u128::from(yi) * u128::from(yi);
    }
    if y == 0 {
        return Err(AoiError::InsufficientDeliveries { count: pairs.len() + 1 });
    }
    let e_sy = sy as f64 / n;
    let e_y = y as f64 / n;
    let e_y2 = y2 as f64 / n;
    let slots = (e_sy + (e_y2 - e_y) / 2.0) / e_y;
    Ok(slots * slot.as_ns() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub count: usize,
    pub mean_us: f64,
    /// Population standard deviation.
    pub std_us: f64,
    pub threshold_us: f64,
    /// Fraction of samples strictly above `threshold_us`.
    pub frac_above: f64,
}

pub fn rta_statistics(samples: &[SimDuration], threshold: SimDuration) -> Result<SummaryStats, AoiError> {
    if samples.is_empty() {
        return Err(AoiError::EmptyInput);
    }
    let n = samples.len() as f64;
    let mean_ns = samples.iter().map(|s| s.as_ns() as f64).sum::<f64>() / n;
    let var = samples
        .iter()
        .map(|s| {
            let d = s.as_ns() as f64 - mean_ns;
            d * d
        })
        .sum::<f64>()
        / n;
    let above = samples.iter().filter(|&&s| s > threshold).count();
    Ok(SummaryStats {
        count: samples.len(),
        mean_us: mean_ns / 1e3,
        std_us: var.sqrt() / 1e3,
        threshold_us: threshold.as_us_f64(),
        frac_above: above as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(ns: u64) -> SimTime {
        SimTime::from_ns(ns)
    }

    fn rec(gen: u64, deliver: u64) -> DeliveryRecord {
        DeliveryRecord::new(t(gen), t(deliver))
    }

    /// Mean age sampled at every ns midpoint; exact for integer breakpoints.
    fn grid_average(series: &AoiSeries) -> f64 {
        let (start, end) = series.horizon();
        let mut sum = 0.0f64;
        for ns in start.as_ns()..end.as_ns() {
            let g = series.held_gen(t(ns)).as_ns();
            sum += (ns - g) as f64 + 0.5;
        }
        sum / (end.as_ns() - start.as_ns()) as f64
    }

    /// Ages S, S+1, ..., S+Y-1 slot by slot over each period.
    fn slotted_brute_force(pairs: &[(u64, u64)]) -> f64 {
        let mut total = 0u64;
        let mut slots = 0u64;
        for &(s, y) in pairs {
            for k in 0..y {
                total += s + k;
            }
            slots += y;
        }
        total as f64 / slots as f64
    }

    #[test]
    fn instantaneous_examples() {
        let s = AoiSeries::new(vec![rec(0, 2)], t(0), t(10)).unwrap();
        assert_eq!(instantaneous_aoi(&s, t(5)).unwrap(), SimDuration::from_ns(5));

        let s = AoiSeries::new(vec![rec(0, 2), rec(4, 6)], t(0), t(10)).unwrap();
        assert_eq!(instantaneous_aoi(&s, t(5)).unwrap().as_ns(), 5);
        assert_eq!(instantaneous_aoi(&s, t(7)).unwrap().as_ns(), 3);
        // Right-continuous reset.
        assert_eq!(instantaneous_aoi(&s, t(6)).unwrap().as_ns(), 2);
        // Before any delivery the age runs from the horizon start.
        assert_eq!(instantaneous_aoi(&s, t(1)).unwrap().as_ns(), 1);
        assert!(matches!(instantaneous_aoi(&s, t(11)), Err(AoiError::OutsideHorizon { .. })));
    }

    #[test]
    fn constant_period_average() {
        // Updates generated at 4i-2 and delivered at 4i: S=2, Y=4.
        let records: Vec<_> = (1..=2).map(|i| rec(4 * i - 2, 4 * i)).collect();
        let s = AoiSeries::with_initial_gen(records, t(4), t(8), t(0)).unwrap();
        assert_eq!(empirical_average_aoi(&s).unwrap(), 4.0);
    }

    #[test]
    fn single_ramp_average() {
        // [10,20): gen 3, age 7..17. [20,30): gen 5, age 15..25.
        let s = AoiSeries::with_initial_gen(vec![rec(5, 20), rec(20, 30)], t(10), t(30), t(3)).unwrap();
        assert_eq!(empirical_average_aoi(&s).unwrap(), 16.0);
        // A lone ramp from age a to a+L averages a+L/2.
        let s = AoiSeries::with_initial_gen(vec![rec(5, 40), rec(6, 40)], t(10), t(40), t(4)).unwrap();
        assert_eq!(empirical_average_aoi(&s).unwrap(), 6.0 + 15.0);
    }

    #[test]
    fn insufficient_deliveries() {
        let s = AoiSeries::new(vec![rec(0, 2)], t(0), t(10)).unwrap();
        assert_eq!(empirical_average_aoi(&s), Err(AoiError::InsufficientDeliveries { count: 1 }));
    }

    #[test]
    fn series_validation() {
        assert_eq!(AoiSeries::new(vec![], t(5), t(5)), Err(AoiError::EmptyHorizon));
        assert!(matches!(AoiSeries::new(vec![rec(3, 3)], t(0), t(10)), Err(AoiError::BadRecord { .. })));
        assert!(matches!(
            AoiSeries::new(vec![rec(3, 4), rec(2, 5)], t(0), t(10)),
            Err(AoiError::BadRecord { index: 1, .. })
        ));
        assert!(matches!(AoiSeries::new(vec![rec(3, 12)], t(0), t(10)), Err(AoiError::BadRecord { .. })));
        assert_eq!(
            AoiSeries::with_initial_gen(vec![rec(3, 4)], t(0), t(10), t(1)),
            Err(AoiError::BadInitialEpoch)
        );
    }

    #[test]
    fn formula_examples() {
        let slot = SimDuration::from_ns(1);
        let pairs = vec![(2, 4); 10];
        assert_eq!(analytic_average_aoi(&pairs, slot).unwrap(), 3.5);
        assert_eq!(slotted_brute_force(&pairs), 3.5);
        let pairs = vec![(3, 1), (7, 1), (2, 1)];
        assert!((analytic_average_aoi(&pairs, slot).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(
            analytic_average_aoi(&[(2, 4)], SimDuration::from_us(1)).unwrap(),
            3_500.0
        );
        assert_eq!(analytic_average_aoi(&[], slot), Err(AoiError::EmptyInput));
    }

    #[test]
    fn slotted_pairs_from_records() {
        let records = vec![rec(2_000, 4_000), rec(6_000, 8_000), rec(10_500, 12_900)];
        let pairs = slotted_pairs(&records, SimDuration::from_us(1)).unwrap();
        assert_eq!(pairs, vec![(2, 4), (2, 4)]);
        assert_eq!(slotted_pairs(&records, SimDuration::ZERO), Err(AoiError::ZeroSlot));
    }

    #[test]
    fn rta_examples() {
        let s = rta_statistics(&[SimDuration::from_ns(38_300); 4], SimDuration::from_us(100)).unwrap();
        assert_eq!((s.mean_us, s.std_us, s.frac_above), (38.3, 0.0, 0.0));
        let s = rta_statistics(&[SimDuration::from_us(50), SimDuration::from_us(150)], SimDuration::from_us(100)).unwrap();
        assert_eq!(s.frac_above, 0.5);
        assert_eq!(s.mean_us, 100.0);
        assert_eq!(s.std_us, 50.0);
        // Strictly above.
        let s = rta_statistics(&[SimDuration::from_us(100)], SimDuration::from_us(100)).unwrap();
        assert_eq!(s.frac_above, 0.0);
        assert_eq!(rta_statistics(&[], SimDuration::from_us(100)), Err(AoiError::EmptyInput));
    }

    fn arb_trace() -> impl Strategy<Value = (Vec<DeliveryRecord>, u64, u64, u64)> {
        // (lead, gaps between generations, delays, tail)
        (
            0u64..50,
            prop::collection::vec((1u64..60, 1u64..80), 2..40),
            0u64..100,
        )
            .prop_map(|(lead, steps, tail)| {
                let mut gen = lead;
                let mut last_deliver = 0;
                let mut out = Vec::new();
                for (gap, delay) in steps {
                    gen += gap;
                    let deliver = (gen + delay).max(last_deliver);
                    let deliver = deliver.max(gen + 1);
                    out.push(rec(gen, deliver));
                    last_deliver = deliver;
                }
                let start = lead.min(out[0].deliver.as_ns());
                let end = last_deliver + tail + 1;
                (out, start, end, lead.min(start))
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn continuous_average_matches_grid((records, start, end, init) in arb_trace()) {
            let s = AoiSeries::with_initial_gen(records, t(start), t(end), t(init)).unwrap();
            let exact = empirical_average_aoi(&s).unwrap();
            let grid = grid_average(&s);
            prop_assert!(((exact - grid) / grid).abs() <= 1e-9, "{exact} vs {grid}");
        }

        #[test]
        fn formula_matches_slotted_brute_force(pairs in prop::collection::vec((1u64..=20, 1u64..=50), 1..60)) {
            let f = analytic_average_aoi(&pairs, SimDuration::from_ns(1)).unwrap();
            let b = slotted_brute_force(&pairs);
            prop_assert!(((f - b) / b).abs() <= 1e-12, "{f} vs {b}");
        }

        #[test]
        fn sawtooth_shape((records, start, end, init) in arb_trace()) {
            let s = AoiSeries::with_initial_gen(records, t(start), t(end), t(init)).unwrap();
            let mut ages = Vec::new();
            for (from, to, gen) in s.segments() {
                // Slope one inside a segment.
                let a = instantaneous_aoi(&s, from).unwrap();
                let b = instantaneous_aoi(&s, t(to.as_ns() - 1)).unwrap();
                prop_assert_eq!(b.as_ns() - a.as_ns(), to.as_ns() - 1 - from.as_ns());
                prop_assert_eq!(a, from - gen);
                ages.push((a.as_ns(), (to - gen).as_ns()));
            }
            // Drops happen only at delivery instants.
            for w in s.segments().collect::<Vec<_>>().windows(2) {
                let boundary = w[1].0;
                prop_assert!(s.records().iter().any(|r| r.deliver == boundary));
            }
            let avg = empirical_average_aoi(&s).unwrap();
            let lo = ages.iter().map(|a| a.0).min().unwrap() as f64;
            let hi = ages.iter().map(|a| a.1).max().unwrap() as f64;
            prop_assert!(avg >= lo && avg <= hi);
        }
    }
}
