//! Latency of the MAC-to-application feedback path.

use std::path::PathBuf;

use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::sim::{RngStream, SimDuration, SimTime};

// Coefficients of variation of the two mixture components used when fitting
// a target (mean, std, tail fraction).
const BODY_CV: f64 = 0.5;
const TAIL_CV: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean_us: f64,
    pub std_us: f64,
}

/// Configured latency distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TunnelLatencyModel {
    Constant {
        latency_us: f64,
    },
    /// Single lognormal matched to the given mean and standard deviation.
    Lognormal {
        mean_us: f64,
        std_us: f64,
    },
    Mixture {
        components: Vec<MixtureComponent>,
    },
    /// Lognormal mixture fitted so that the full request-to-arrival interval
    /// (tunnel plus the fixed generation and descent latencies) has the given
    /// mean, standard deviation and fraction above `threshold_us`.
    RtaFit {
        mean_us: f64,
        std_us: f64,
        frac_above: f64,
        threshold_us: f64,
    },
    /// Samples in microseconds, one per line, drawn uniformly with
    /// replacement.
    Empirical {
        path: PathBuf,
    },
}

impl TunnelLatencyModel {
    /// Request-to-arrival calibration measured with the real-time kernel.
    pub fn rta_with_patch() -> Self {
        TunnelLatencyModel::RtaFit {
            mean_us: 38.30,
            std_us: 71.52,
            frac_above: 0.0133,
            threshold_us: 100.0,
        }
    }

    /// Request-to-arrival calibration measured on the stock kernel.
    pub fn rta_without_patch() -> Self {
        TunnelLatencyModel::RtaFit {
            mean_us: 58.17,
            std_us: 120.40,
            frac_above: 0.0665,
            threshold_us: 100.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum TunnelError {
    #[error("invalid tunnel latency parameter: {0}")]
    Invalid(String),
    #[error("no two-component lognormal mixture matches mean {mean_us}us, std {std_us}us, P(>{threshold_us}us) = {frac_above}")]
    NoFit {
        mean_us: f64,
        std_us: f64,
        frac_above: f64,
        threshold_us: f64,
    },
    #[error("reading latency samples from {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn lognormal_params(mean: f64, cv: f64) -> (f64, f64) {
    let s2 = (1.0 + cv * cv).ln();
    (mean.ln() - s2 / 2.0, s2.sqrt())
}

fn lognormal_tail(mean: f64, cv: f64, threshold: f64) -> f64 {
    if threshold <= 0.0 {
        return 1.0;
    }
    let (mu, sigma) = lognormal_params(mean, cv);
    0.5 * erfc((threshold.ln() - mu) / (sigma * std::f64::consts::SQRT_2))
}

/// Component means `(body, tail)` for tail weight `p` that reproduce the
/// first two moments, if any.
fn means_for_weight(p: f64, mean: f64, second_moment: f64) -> Option<(f64, f64)> {
    let kb = 1.0 + BODY_CV * BODY_CV;
    let kt = 1.0 + TAIL_CV * TAIL_CV;
    // kb (mean - p x)^2 / (1 - p) + p kt x^2 = second_moment, solved for x.
    let a = kb * p * p / (1.0 - p) + p * kt;
    let b = -2.0 * kb * mean * p / (1.0 - p);
    let c = kb * mean * mean / (1.0 - p) - second_moment;
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let tail = (-b + disc.sqrt()) / (2.0 * a);
    let body = (mean - p * tail) / (1.0 - p);
    (body > 0.0 && tail > body).then_some((body, tail))
}

/// Two-component lognormal mixture with the given mean, standard deviation
/// and `P(X > threshold) = frac_above`.
pub fn fit_mixture(
    mean_us: f64,
    std_us: f64,
    frac_above: f64,
    threshold_us: f64,
) -> Result<Vec<MixtureComponent>, TunnelError> {
    let no_fit = || TunnelError::NoFit {
        mean_us,
        std_us,
        frac_above,
        threshold_us,
    };
    if !(mean_us > 0.0 && std_us > 0.0 && (0.0..1.0).contains(&frac_above)) {
        return Err(no_fit());
    }
    let m2 = mean_us * mean_us + std_us * std_us;
    let residual = |p: f64| {
        means_for_weight(p, mean_us, m2).map(|(body, tail)| {
            (1.0 - p) * lognormal_tail(body, BODY_CV, threshold_us)
                + p * lognormal_tail(tail, TAIL_CV, threshold_us)
                - frac_above
        })
    };
    // The residual need not be monotone in p; take the first upward crossing.
    const GRID: usize = 20_000;
    let mut prev: Option<(f64, f64)> = None;
    let mut bracket = None;
    for i in 1..GRID {
        let p = 0.5 * i as f64 / GRID as f64;
        let Some(r) = residual(p) else {
            prev = None;
            continue;
        };
        if let Some((pp, pr)) = prev {
            if pr <= 0.0 && r >= 0.0 {
                bracket = Some((pp, p));
                break;
            }
        }
        prev = Some((p, r));
    }
    let (mut lo, mut hi) = bracket.ok_or_else(no_fit)?;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        match residual(mid) {
            Some(r) if r < 0.0 => lo = mid,
            Some(_) => hi = mid,
            None => return Err(no_fit()),
        }
    }
    let p = 0.5 * (lo + hi);
    let (body, tail) = means_for_weight(p, mean_us, m2).ok_or_else(no_fit)?;
    Ok(vec![
        MixtureComponent {
            weight: 1.0 - p,
            mean_us: body,
            std_us: body * BODY_CV,
        },
        MixtureComponent {
            weight: p,
            mean_us: tail,
            std_us: tail * TAIL_CV,
        },
    ])
}

/// A latency distribution ready to sample.
#[derive(Debug, Clone)]
pub enum TunnelLatency {
    Constant(SimDuration),
    Mixture {
        cumulative: Vec<f64>,
        components: Vec<LogNormal<f64>>,
        mean_us: f64,
    },
    Empirical(Vec<SimDuration>),
}

impl TunnelLatency {
    /// Resolves a model. `fixed_rta_offset` is the deterministic part of the
    /// request-to-arrival interval that an `rta_fit` model must leave out.
    pub fn resolve(model: &TunnelLatencyModel, fixed_rta_offset: SimDuration) -> Result<Self, TunnelError> {
        let invalid = |m: &str| TunnelError::Invalid(m.to_owned());
        match model {
            TunnelLatencyModel::Constant { latency_us } => {
                let d = SimDuration::try_from_us_f64(*latency_us).map_err(|e| TunnelError::Invalid(e.to_string()))?;
                if d.is_zero() {
                    return Err(invalid("constant latency must be > 0"));
                }
                Ok(TunnelLatency::Constant(d))
            }
            TunnelLatencyModel::Lognormal { mean_us, std_us } => Self::mixture(&[MixtureComponent {
                weight: 1.0,
                mean_us: *mean_us,
                std_us: *std_us,
            }]),
            TunnelLatencyModel::Mixture { components } => Self::mixture(components),
            TunnelLatencyModel::RtaFit {
                mean_us,
                std_us,
                frac_above,
                threshold_us,
            } => {
                let offset = fixed_rta_offset.as_us_f64();
                if *mean_us <= offset {
                    return Err(invalid("rta_fit mean must exceed the fixed generation and descent latency"));
                }
                let comps = fit_mixture(mean_us - offset, *std_us, *frac_above, threshold_us - offset)?;
                Self::mixture(&comps)
            }
            TunnelLatencyModel::Empirical { path } => {
                let text = std::fs::read_to_string(path).map_err(|source| TunnelError::Io {
                    path: path.clone(),
                    source,
                })?;
                let samples = text
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty() && !l.starts_with('#'))
                    .map(|l| {
                        let us: f64 = l.parse().map_err(|_| TunnelError::Invalid(format!("bad sample `{l}`")))?;
                        if !(us.is_finite() && us > 0.0) {
                            return Err(TunnelError::Invalid(format!("sample `{l}` must be > 0")));
                        }
                        Ok(SimDuration::from_ns(((us * 1e3).round() as u64).max(1)))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                if samples.is_empty() {
                    return Err(invalid("empirical sample file is empty"));
                }
                Ok(TunnelLatency::Empirical(samples))
            }
        }
    }

    fn mixture(components: &[MixtureComponent]) -> Result<Self, TunnelError> {
        if components.is_empty() {
            return Err(TunnelError::Invalid("mixture needs at least one component".into()));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if total.is_nan() || total <= 0.0 || components.iter().any(|c| c.weight < 0.0) {
            return Err(TunnelError::Invalid("mixture weights must be non-negative with a positive sum".into()));
        }
        let mut cumulative = Vec::with_capacity(components.len());
        let mut dists = Vec::with_capacity(components.len());
        let mut acc = 0.0;
        let mut mean = 0.0;
        for c in components {
            if !(c.mean_us > 0.0 && c.std_us > 0.0) {
                return Err(TunnelError::Invalid("lognormal mean and std must be > 0".into()));
            }
            let (mu, sigma) = lognormal_params(c.mean_us, c.std_us / c.mean_us);
            dists.push(LogNormal::new(mu, sigma).map_err(|e| TunnelError::Invalid(e.to_string()))?);
            acc += c.weight / total;
            cumulative.push(acc);
            mean += c.weight / total * c.mean_us;
        }
        Ok(TunnelLatency::Mixture {
            cumulative,
            components: dists,
            mean_us: mean,
        })
    }

    pub fn mean(&self) -> SimDuration {
        match self {
            TunnelLatency::Constant(d) => *d,
            TunnelLatency::Mixture { mean_us, .. } => SimDuration::from_ns((mean_us * 1e3).round() as u64),
            TunnelLatency::Empirical(s) => {
                let sum: u128 = s.iter().map(|d| u128::from(d.as_ns())).sum();
                SimDuration::from_ns((sum / s.len() as u128) as u64)
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SimDuration {
        match self {
            TunnelLatency::Constant(d) => *d,
            TunnelLatency::Mixture {
                cumulative,
                components,
                ..
            } => {
                let u: f64 = rng.random();
                let i = cumulative.iter().position(|&c| u < c).unwrap_or(components.len() - 1);
                let us = components[i].sample(rng);
                SimDuration::from_ns(((us * 1e3).round() as u64).max(1))
            }
            TunnelLatency::Empirical(s) => s[rng.random_range(0..s.len())],
        }
    }
}

/// The cross-layer feedback path from the transmission status collector to
/// the application sampler.
#[derive(Debug)]
pub struct Tunnel {
    enabled: bool,
    latency: TunnelLatency,
    rng: RngStream,
    delivered: u64,
    suppressed: u64,
}

impl Tunnel {
    pub fn new(enabled: bool, latency: TunnelLatency, master_seed: u64) -> Self {
        Tunnel {
            enabled,
            latency,
            rng: RngStream::new(master_seed, "tunnel.latency"),
            delivered: 0,
            suppressed: 0,
        }
    }

    pub fn latency(&self) -> &TunnelLatency {
        &self.latency
    }

    /// Arrival time of a feedback emitted at `now`, or `None` when the
    /// tunnel is switched off.
    pub fn tunnel_deliver(&mut self, now: SimTime) -> Option<SimTime> {
        if !self.enabled {
            self.suppressed += 1;
            return None;
        }
        self.delivered += 1;
        Some(now + self.latency.sample(&mut self.rng))
    }

    pub fn delivered(&self) -> u64 {
        self.delivered
    }

    pub fn suppressed(&self) -> u64 {
        self.suppressed
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(samples: &[f64], threshold: f64) -> (f64, f64, f64) {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let above = samples.iter().filter(|&&x| x > threshold).count() as f64 / n;
        (mean, var.sqrt(), above)
    }

    fn draw(lat: &TunnelLatency, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = RngStream::new(seed, "test");
        (0..n).map(|_| lat.sample(&mut rng).as_us_f64()).collect()
    }

    #[test]
    fn constant_latency() {
        let lat = TunnelLatency::resolve(&TunnelLatencyModel::Constant { latency_us: 10.0 }, SimDuration::ZERO).unwrap();
        let mut t = Tunnel::new(true, lat, 1);
        assert_eq!(t.tunnel_deliver(SimTime::from_us(100)), Some(SimTime::from_us(110)));
    }

    #[test]
    fn disabled_tunnel_never_delivers() {
        let lat = TunnelLatency::Constant(SimDuration::from_us(10));
        let mut t = Tunnel::new(false, lat, 1);
        assert_eq!(t.tunnel_deliver(SimTime::ZERO), None);
        assert_eq!(t.suppressed(), 1);
    }

    #[test]
    fn lognormal_moment_match_mean() {
        let model = TunnelLatencyModel::Lognormal {
            mean_us: 38.30,
            std_us: 71.52,
        };
        let lat = TunnelLatency::resolve(&model, SimDuration::ZERO).unwrap();
        let xs = draw(&lat, 100_000, 3);
        let (mean, _, above) = moments(&xs, 100.0);
        assert!((mean - 38.30).abs() / 38.30 < 0.05, "mean {mean}");
        // A single lognormal with these moments has about 8% above 100us,
        // far from the measured 1.33%.
        assert!(above > 0.06, "frac above {above}");
    }

    #[test]
    fn lognormal_no_patch_tail_fraction() {
        let model = TunnelLatencyModel::Lognormal {
            mean_us: 58.17,
            std_us: 120.40,
        };
        let lat = TunnelLatency::resolve(&model, SimDuration::ZERO).unwrap();
        let (mean, _, above) = moments(&draw(&lat, 100_000, 4), 100.0);
        assert!((mean - 58.17).abs() / 58.17 < 0.05);
        assert!(above > 0.0665, "reported next to 6.65%: {above}");
    }

    #[test]
    fn mixture_fit_hits_all_three_targets() {
        for (m, s, f) in [(38.30, 71.52, 0.0133), (58.17, 120.40, 0.0665), (23.30, 71.52, 0.0133)] {
            let comps = fit_mixture(m, s, f, 100.0).unwrap();
            let w: f64 = comps.iter().map(|c| c.weight).sum();
            assert!((w - 1.0).abs() < 1e-12);
            let mean: f64 = comps.iter().map(|c| c.weight * c.mean_us).sum();
            let m2: f64 = comps.iter().map(|c| c.weight * (c.std_us.powi(2) + c.mean_us.powi(2))).sum();
            let tail: f64 = comps
                .iter()
                .map(|c| c.weight * lognormal_tail(c.mean_us, c.std_us / c.mean_us, 100.0))
                .sum();
            assert!((mean - m).abs() < 1e-9, "mean {mean}");
            assert!(((m2 - mean * mean).sqrt() - s).abs() < 1e-9);
            assert!((tail - f).abs() < 1e-9, "tail {tail}");
        }
    }

    #[test]
    fn rta_fit_subtracts_fixed_offset() {
        let lat = TunnelLatency::resolve(&TunnelLatencyModel::rta_with_patch(), SimDuration::from_us(15)).unwrap();
        let xs: Vec<f64> = draw(&lat, 200_000, 8).into_iter().map(|x| x + 15.0).collect();
        let (mean, std, above) = moments(&xs, 100.0);
        assert!((mean - 38.30).abs() / 38.30 < 0.05, "mean {mean}");
        assert!((std - 71.52).abs() / 71.52 < 0.15, "std {std}");
        assert!((above - 0.0133).abs() < 0.003, "above {above}");
        assert!((lat.mean().as_us_f64() - 23.30).abs() < 1e-3);
    }

    #[test]
    fn impossible_fit_is_reported() {
        assert!(fit_mixture(38.3, 1.0, 0.5, 100.0).is_err());
        assert!(TunnelLatency::resolve(&TunnelLatencyModel::rta_with_patch(), SimDuration::from_us(50)).is_err());
    }

    #[test]
    fn empirical_samples_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lat.txt");
        std::fs::write(&path, "# us\n10\n20.5\n\n30\n").unwrap();
        let lat = TunnelLatency::resolve(&TunnelLatencyModel::Empirical { path }, SimDuration::ZERO).unwrap();
        assert_eq!(lat.mean(), SimDuration::from_ns(20_166));
        let xs = draw(&lat, 1_000, 1);
        assert!(xs.iter().all(|x| [10.0, 20.5, 30.0].contains(x)));
    }

    #[test]
    fn samples_are_positive() {
        let lat = TunnelLatency::resolve(&TunnelLatencyModel::rta_without_patch(), SimDuration::from_us(15)).unwrap();
        assert!(draw(&lat, 50_000, 2).iter().all(|&x| x > 0.0));
    }
}
