//! Calibration-free alarm thresholds from Gaussian tail bounds.
//!
//! Under the null model the perturbed activations `X` (`n x d`) have i.i.d.
//! `N(0, sigma2 / n)` entries and the base null basis `V` (`d x k`) is fixed.
//! With `x = ln(1/alpha)`:
//!
//! * `lm`: `||XV||_F^2 <= sigma2 [k + 2 sqrt(k x / n) + 2 x / n]` w.p. `1 - alpha`
//!   (chi-square upper tail with `nk` degrees of freedom).
//! * `mp_edge`: `||XV||_F^2 <= k sigma2 (1 + sqrt(d/n) + t)^2` with
//!   `t = sqrt(2 x / n)`, w.p. `1 - alpha` (operator-norm route).
//! * `ratio`: `SNL <= [k + 2 sqrt(k x/n) + 2x/n] / [d - 2 sqrt(d x / n)]`
//!   w.p. `1 - 2 alpha` (numerator tail plus denominator lower tail).

use std::fmt;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ZdpError};
use crate::synth::{self, RngSpec};

/// Two-sided 95% normal quantile used for Wilson intervals.
const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSpec {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub sigma2: f64,
    pub alpha: f64,
}

impl ThresholdSpec {
    pub fn new(n: usize, d: usize, k: usize, sigma2: f64, alpha: f64) -> Result<Self> {
        let spec = Self {
            n,
            d,
            k,
            sigma2,
            alpha,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.k == 0 {
            return Err(ZdpError::InvalidArgument(format!(
                "n, d, k must be >= 1 (got {}, {}, {})",
                self.n, self.d, self.k
            )));
        }
        if self.k > self.d {
            return Err(ZdpError::InvalidArgument(format!(
                "k = {} exceeds d = {}",
                self.k, self.d
            )));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(ZdpError::InvalidArgument(format!(
                "sigma2 must be positive, got {}",
                self.sigma2
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return Err(ZdpError::InvalidArgument(format!(
                "alpha must lie in (0, 1/2), got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// `x = ln(1/alpha)`.
    pub fn log_inv_alpha(&self) -> f64 {
        (1.0 / self.alpha).ln()
    }

    /// `d - 2 sqrt(d x / n)`, the denominator of the ratio threshold.
    pub fn ratio_denominator(&self) -> f64 {
        let x = self.log_inv_alpha();
        self.d as f64 - 2.0 * (self.d as f64 * x / self.n as f64).sqrt()
    }
}

/// Plug-in noise scale `||X||_F^2 / d`, matching `E||X||_F^2 = sigma2 d`.
pub fn estimate_sigma2(x: &DMatrix<f64>) -> f64 {
    x.norm_squared() / x.ncols() as f64
}

fn lm_core(spec: &ThresholdSpec) -> f64 {
    let x = spec.log_inv_alpha();
    let (n, k) = (spec.n as f64, spec.k as f64);
    k + 2.0 * (k * x / n).sqrt() + 2.0 * x / n
}

/// Energy threshold from the chi-square (Laurent–Massart) upper tail.
pub fn lm_numerator_threshold(spec: &ThresholdSpec) -> Result<f64> {
    spec.validate()?;
    Ok(spec.sigma2 * lm_core(spec))
}

/// Energy threshold from the operator-norm route anchored at the
/// Marchenko–Pastur edge `(1 + sqrt(d/n))^2`.
pub fn mp_edge_threshold(spec: &ThresholdSpec) -> Result<f64> {
    spec.validate()?;
    let (n, d) = (spec.n as f64, spec.d as f64);
    let t = (2.0 * spec.log_inv_alpha() / n).sqrt();
    let gamma = d / n;
    Ok(spec.k as f64 * spec.sigma2 * (1.0 + gamma.sqrt() + t).powi(2))
}

/// Threshold for the SNL ratio; independent of `sigma2`.
pub fn snl_ratio_threshold(spec: &ThresholdSpec) -> Result<f64> {
    spec.validate()?;
    let den = spec.ratio_denominator();
    if den <= 0.0 {
        return Err(ZdpError::RatioDenominator(den));
    }
    Ok(lm_core(spec) / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "kebab-case")]
pub enum Route {
    /// Raw energy against the chi-square tail.
    Lm,
    /// Raw energy against the operator-norm tail.
    MpEdge,
    /// SNL against the ratio bound.
    Ratio,
}

impl Route {
    pub const ALL: [Route; 3] = [Route::Lm, Route::MpEdge, Route::Ratio];

    pub fn threshold(&self, spec: &ThresholdSpec) -> Result<f64> {
        match self {
            Route::Lm => lm_numerator_threshold(spec),
            Route::MpEdge => mp_edge_threshold(spec),
            Route::Ratio => snl_ratio_threshold(spec),
        }
    }

    /// Probability bound on a false alarm under the Gaussian null.
    pub fn nominal_level(&self, alpha: f64) -> f64 {
        match self {
            Route::Lm | Route::MpEdge => alpha,
            Route::Ratio => 2.0 * alpha,
        }
    }

    /// What the route compares: `"energy"` (NVL) or `"snl"`.
    pub fn statistic(&self) -> &'static str {
        match self {
            Route::Lm | Route::MpEdge => "energy",
            Route::Ratio => "snl",
        }
    }
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Route::Lm => "lm",
            Route::MpEdge => "mp-edge",
            Route::Ratio => "ratio",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Quiet,
    Drift,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alarm {
    pub route: Route,
    pub value: f64,
    pub threshold: f64,
    pub margin: f64,
    pub verdict: Verdict,
}

/// Compares a statistic with the route's threshold; drift only on strict
/// exceedance. `value` is the raw energy `||H_hat V0||_F^2` for `lm` and
/// `mp_edge`, and the SNL ratio for `ratio`.
pub fn drift_alarm(value: f64, spec: &ThresholdSpec, route: Route) -> Result<Alarm> {
    if !value.is_finite() || value < 0.0 {
        return Err(ZdpError::InvalidArgument(format!(
            "statistic must be finite and >= 0, got {value}"
        )));
    }
    if route == Route::Ratio && value > 1.0 + 1e-12 {
        return Err(ZdpError::InvalidArgument(format!(
            "ratio route compares SNL in [0, 1]; got {value} (raw energy passed?)"
        )));
    }
    let threshold = route.threshold(spec)?;
    let verdict = if value > threshold {
        Verdict::Drift
    } else {
        Verdict::Quiet
    };
    Ok(Alarm {
        route,
        value,
        threshold,
        margin: value - threshold,
        verdict,
    })
}

/// Empirical exceedance of one route under the exact Gaussian null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteCoverage {
    pub route: Route,
    /// `None` when the route is undefined for the spec (ratio denominator <= 0).
    pub threshold: Option<f64>,
    pub nominal_level: f64,
    pub trials: usize,
    pub exceedances: usize,
    pub rate: f64,
    pub stderr: f64,
    /// Wilson 95% interval.
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailValidation {
    pub spec: ThresholdSpec,
    pub seed: u64,
    pub trials: usize,
    pub routes: Vec<RouteCoverage>,
}

impl TailValidation {
    pub fn route(&self, route: Route) -> Option<&RouteCoverage> {
        self.routes.iter().find(|r| r.route == route)
    }
}

pub fn wilson_interval(successes: usize, trials: usize) -> (f64, f64) {
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = Z95 * Z95;
    let center = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = Z95 * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / (1.0 + z2 / n);
    let lo = if successes == 0 {
        0.0
    } else {
        (center - half).max(0.0)
    };
    let hi = if successes == trials {
        1.0
    } else {
        (center + half).min(1.0)
    };
    (lo, hi)
}

/// Monte Carlo false-alarm rates of every route.
///
/// The null basis is Haar-random from stream `substream(0)` of the seed;
/// trial `i` draws its `X` from `substream(i + 1)`. Trials run in parallel
/// and the result does not depend on the thread count.
pub fn tail_mc_validate(spec: &ThresholdSpec, trials: usize, seed: u64) -> Result<TailValidation> {
    spec.validate()?;
    if trials < 1000 {
        return Err(ZdpError::InvalidArgument(format!(
            "need at least 1000 trials, got {trials}"
        )));
    }
    let root = RngSpec::new(seed);
    let v = synth::haar_orthonormal(spec.d, spec.k, &mut root.substream(0).rng());
    let thresholds: Vec<(Route, Option<f64>)> = Route::ALL
        .iter()
        .map(|&r| (r, r.threshold(spec).ok()))
        .collect();
    let scale = (spec.sigma2 / spec.n as f64).sqrt();

    let samples: Vec<(f64, f64)> = (0..trials as u64)
        .into_par_iter()
        .map(|i| {
            let x = synth::standard_normal_matrix(spec.n, spec.d, &mut root.substream(i + 1).rng())
                * scale;
            let energy = (&x * &v).norm_squared();
            (energy, energy / x.norm_squared())
        })
        .collect();

    let routes = thresholds
        .into_iter()
        .map(|(route, threshold)| {
            let exceedances = match threshold {
                Some(th) => samples
                    .iter()
                    .filter(|(energy, ratio)| match route {
                        Route::Ratio => *ratio > th,
                        _ => *energy > th,
                    })
                    .count(),
                None => 0,
            };
            let rate = exceedances as f64 / trials as f64;
            let (ci_low, ci_high) = wilson_interval(exceedances, trials);
            RouteCoverage {
                route,
                threshold,
                nominal_level: route.nominal_level(spec.alpha),
                trials,
                exceedances,
                rate,
                stderr: (rate * (1.0 - rate) / trials as f64).sqrt(),
                ci_low,
                ci_high,
            }
        })
        .collect();
    Ok(TailValidation {
        spec: *spec,
        seed,
        trials,
        routes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(n: usize, d: usize, k: usize, sigma2: f64, alpha: f64) -> ThresholdSpec {
        ThresholdSpec::new(n, d, k, sigma2, alpha).unwrap()
    }

    #[test]
    fn lm_hand_value() {
        // 4 + 2 sqrt(4 ln 20 / 100) + 2 ln 20 / 100
        let x = 20.0_f64.ln();
        let hand = 4.0 + 2.0 * (4.0 * x / 100.0).sqrt() + 2.0 * x / 100.0;
        let th = lm_numerator_threshold(&spec(100, 50, 4, 1.0, 0.05)).unwrap();
        assert!((th - hand).abs() < 1e-12);
        assert!((th - 4.7523).abs() < 1e-4);
    }

    #[test]
    fn lm_limits_and_scaling() {
        let near_one = lm_numerator_threshold(&spec(100, 50, 4, 1.0, 0.5 - 1e-12)).unwrap();
        let at_mean = 4.0 + 2.0 * (4.0 * 2.0_f64.ln() / 100.0).sqrt() + 2.0 * 2.0_f64.ln() / 100.0;
        assert!((near_one - at_mean).abs() < 1e-9);
        // x -> 0 drives the threshold to the mean sigma2 k.
        let s = ThresholdSpec {
            n: 100,
            d: 50,
            k: 4,
            sigma2: 1.0,
            alpha: 1.0 - 1e-12,
        };
        assert!((s.sigma2 * lm_core(&s) - 4.0).abs() < 1e-5);
        let a = lm_numerator_threshold(&spec(100, 50, 4, 1.0, 0.05)).unwrap();
        let b = lm_numerator_threshold(&spec(100, 50, 4, 2.0, 0.05)).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn mp_edge_hand_value() {
        let t = (2.0 * 20.0_f64.ln() / 100.0).sqrt();
        assert!((t - 0.24478).abs() < 1e-5);
        let th = mp_edge_threshold(&spec(100, 50, 4, 1.0, 0.05)).unwrap();
        assert!((th - 4.0 * (1.0 + 0.5_f64.sqrt() + t).powi(2)).abs() < 1e-12);
        assert!((th - 15.239365).abs() < 1e-6, "{th}");
        // gamma -> 0 and t -> 0: threshold -> k sigma2.
        let s = ThresholdSpec {
            n: 100_000_000,
            d: 1,
            k: 1,
            sigma2: 1.0,
            alpha: 0.4,
        };
        assert!((mp_edge_threshold(&s).unwrap() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn mp_edge_dominates_lm_on_grid() {
        for n in [20, 100, 500] {
            for d in [16, 64, 256] {
                for k in [1, 2, 4] {
                    for alpha in [0.01, 0.05, 0.2] {
                        let s = spec(n, d, k, 1.0, alpha);
                        assert!(
                            mp_edge_threshold(&s).unwrap() >= lm_numerator_threshold(&s).unwrap()
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn ratio_hand_value_and_limits() {
        let th = snl_ratio_threshold(&spec(200, 64, 8, 1.0, 0.05)).unwrap();
        assert!((th - 0.14059).abs() < 1e-4, "{th}");
        let big = snl_ratio_threshold(&spec(100_000_000, 64, 8, 1.0, 0.05)).unwrap();
        assert!((big - 0.125).abs() < 1e-4);
        // 8 - 2 sqrt(8 * 2.9957 / 1) < 0, while n = 10, d = 64 still leaves 55.24
        assert!(matches!(
            snl_ratio_threshold(&spec(1, 8, 2, 1.0, 0.05)),
            Err(ZdpError::RatioDenominator(_))
        ));
        assert!((spec(10, 64, 8, 1.0, 0.05).ratio_denominator() - 55.2427).abs() < 1e-4);
        let a = snl_ratio_threshold(&spec(200, 64, 8, 1.0, 0.05)).unwrap();
        let b = snl_ratio_threshold(&spec(200, 64, 8, 7.0, 0.05)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spec_validation() {
        assert!(ThresholdSpec::new(10, 4, 5, 1.0, 0.05).is_err());
        assert!(ThresholdSpec::new(10, 4, 2, 1.0, 0.6).is_err());
        assert!(ThresholdSpec::new(10, 4, 2, 1.0, 0.0).is_err());
        assert!(ThresholdSpec::new(10, 4, 2, -1.0, 0.1).is_err());
        assert!(ThresholdSpec::new(0, 4, 2, 1.0, 0.1).is_err());
    }

    #[test]
    fn alarm_boundaries() {
        let s = spec(200, 64, 8, 1.0, 0.05);
        for route in Route::ALL {
            assert_eq!(drift_alarm(0.0, &s, route).unwrap().verdict, Verdict::Quiet);
            let th = route.threshold(&s).unwrap();
            let at = drift_alarm(th, &s, route).unwrap();
            assert_eq!(at.verdict, Verdict::Quiet);
            assert_eq!(at.margin, 0.0);
        }
        let above = drift_alarm(0.2, &s, Route::Ratio).unwrap();
        assert_eq!(above.verdict, Verdict::Drift);
        assert!(above.margin > 0.0);
        assert!(drift_alarm(9.0, &s, Route::Ratio).is_err());
    }

    #[test]
    fn monte_carlo_alarm_rate_is_controlled() {
        let s = spec(100, 50, 4, 1.0, 0.05);
        let v = tail_mc_validate(&s, 4000, 17).unwrap();
        let lm = v.route(Route::Lm).unwrap();
        assert!(lm.rate <= 0.05 + 3.0 * (0.05 * 0.95 / 4000.0_f64).sqrt());
        assert!(v.route(Route::MpEdge).unwrap().rate <= lm.rate);
        assert!(v.route(Route::Ratio).unwrap().rate <= 0.10);
        assert!(tail_mc_validate(&s, 999, 1).is_err());
    }

    #[test]
    fn monte_carlo_is_deterministic() {
        let s = spec(30, 10, 2, 1.0, 0.1);
        assert_eq!(
            tail_mc_validate(&s, 1500, 3).unwrap(),
            tail_mc_validate(&s, 1500, 3).unwrap()
        );
    }

    #[test]
    fn near_half_alpha_is_below_half() {
        let s = spec(100, 50, 4, 1.0, 0.5 - 1e-6);
        let v = tail_mc_validate(&s, 5000, 23).unwrap();
        let lm = v.route(Route::Lm).unwrap();
        assert!(lm.rate < 0.5, "{}", lm.rate);
    }

    #[test]
    fn wilson_contains_rate() {
        let (lo, hi) = wilson_interval(50, 1000);
        assert!(lo < 0.05 && 0.05 < hi);
        assert_eq!(wilson_interval(0, 100).0, 0.0);
    }

    proptest! {
        #[test]
        fn thresholds_are_monotone(n in 20usize..400, d in 8usize..128, k in 1usize..8, a in 0.001f64..0.45) {
            prop_assume!(k < d);
            let s = spec(n, d, k, 1.0, a);
            let bigger_k = spec(n, d, k + 1, 1.0, a);
            let smaller_alpha = spec(n, d, k, 1.0, a / 2.0);
            let more_n = spec(n + 50, d, k, 1.0, a);
            for route in [Route::Lm, Route::MpEdge] {
                prop_assert!(route.threshold(&bigger_k).unwrap() >= route.threshold(&s).unwrap());
                prop_assert!(route.threshold(&smaller_alpha).unwrap() >= route.threshold(&s).unwrap());
            }
            prop_assert!(lm_numerator_threshold(&more_n).unwrap() <= lm_numerator_threshold(&s).unwrap());
            if let (Ok(r), Ok(rk), Ok(ra), Ok(rn)) = (
                snl_ratio_threshold(&s),
                snl_ratio_threshold(&bigger_k),
                snl_ratio_threshold(&smaller_alpha),
                snl_ratio_threshold(&more_n),
            ) {
                prop_assert!(rk >= r && ra >= r && rn <= r);
            }
        }

        #[test]
        fn energy_thresholds_scale_with_sigma2(scale in 0.01f64..100.0) {
            let a = spec(100, 40, 3, 1.0, 0.05);
            let b = spec(100, 40, 3, scale, 0.05);
            for route in [Route::Lm, Route::MpEdge] {
                let ta = route.threshold(&a).unwrap();
                let tb = route.threshold(&b).unwrap();
                prop_assert!((tb - scale * ta).abs() <= 1e-12 * tb);
            }
        }
    }
}
