//! From an observed distribution of money back to strategies.
//!
//! Off the threshold support the ratio `M_i / M_{i-1}` equals `lambda`; at
//! `i - 1 = k` for a threshold `k` in use it drops. Reading off the drops gives
//! the support, and matching masses between consecutive thresholds gives the
//! fractions playing each.

use std::io::Read;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bestreply::{best_threshold, EnvironmentRates};
use crate::error::{Error, Result};
use crate::maxent::{build_from_mix, row_weights, MaxEntSolution};
use crate::model::{AgentType, StrategyMix, Threshold, ToleranceConfig};
use crate::simulator::l2_distance;

/// Tolerance on the total of observed fractions.
pub const OBSERVED_SUM_TOL: f64 = 1e-6;

/// Discount factors searched by [`calibrate_type`].
pub const DELTA_MIN: f64 = 1e-300;
pub const DELTA_MAX: f64 = 0.9999;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObservedDistribution {
    /// `M_0..=M_K` with `M_K > 0`.
    fractions: Vec<f64>,
    pub sample_size: Option<u64>,
}

#[derive(Debug, Deserialize)]
struct ObservedRow {
    money: usize,
    fraction: f64,
}

impl ObservedDistribution {
    /// Validates fractions and drops trailing zeros.
    pub fn new(mut fractions: Vec<f64>, sample_size: Option<u64>) -> Result<Self> {
        if let Some(&bad) = fractions.iter().find(|x| !(**x >= 0.0 && x.is_finite())) {
            return Err(Error::ParameterRange {
                field: "fraction",
                value: bad,
            });
        }
        let sum: f64 = fractions.iter().sum();
        if (sum - 1.0).abs() > OBSERVED_SUM_TOL {
            return Err(Error::FractionSum { sum });
        }
        while fractions.last() == Some(&0.0) {
            fractions.pop();
        }
        Ok(ObservedDistribution {
            fractions,
            sample_size,
        })
    }

    pub fn from_solution(sol: &MaxEntSolution) -> Result<Self> {
        Self::new(sol.aggregate.clone(), None)
    }

    /// Reads `money,fraction` rows; missing levels count as zero.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut fractions = Vec::new();
        for row in csv::Reader::from_reader(reader).deserialize() {
            let row: ObservedRow = row?;
            if fractions.len() <= row.money {
                fractions.resize(row.money + 1, 0.0);
            }
            fractions[row.money] += row.fraction;
        }
        Self::new(fractions, None)
    }

    pub fn fractions(&self) -> &[f64] {
        &self.fractions
    }

    /// Highest money level with positive mass.
    pub fn top(&self) -> usize {
        self.fractions.len().saturating_sub(1)
    }

    pub fn mean(&self) -> f64 {
        self.fractions
            .iter()
            .enumerate()
            .map(|(i, x)| i as f64 * x)
            .sum()
    }

    /// No level below the top is empty.
    pub fn fully_supported(&self) -> bool {
        self.fractions.iter().all(|&x| x > 0.0)
    }

    /// `r_i = M_i / M_{i-1}` for `i = 1..=K`, stored at index `i - 1`.
    pub fn ratios(&self) -> Vec<f64> {
        self.fractions.windows(2).map(|w| w[1] / w[0]).collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Explanation {
    /// The `lambda` the fractions were reconstructed with.
    pub lambda: f64,
    pub pi: StrategyMix,
    /// L2 distance between the observation and the max-ent distribution rebuilt from `pi` at the observed mean.
    pub residual: f64,
    pub support_size: usize,
    pub top: usize,
    #[serde(skip)]
    pub rebuilt: MaxEntSolution,
}

impl Explanation {
    pub fn support(&self) -> Vec<usize> {
        self.pi
            .support()
            .into_iter()
            .filter_map(Threshold::finite)
            .collect()
    }
}

/// Reconstructs fractions on `support` (ascending, ending at the top level) by
/// matching the observed mass of each segment between consecutive thresholds,
/// highest segment first.
fn reconstruct_on_support(
    obs: &ObservedDistribution,
    lambda: f64,
    support: &[usize],
    tol: f64,
) -> Result<StrategyMix> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::ParameterRange {
            field: "lambda",
            value: lambda,
        });
    }
    let m = obs.fractions();
    let weights: Vec<Vec<f64>> = support.iter().map(|&k| row_weights(k, lambda)).collect();
    let mut pi = vec![0.0; support.len()];
    for r in (0..support.len()).rev() {
        let start = if r == 0 { 0 } else { support[r - 1] + 1 };
        let seg = start..=support[r];
        let observed: f64 = m[seg.clone()].iter().sum();
        let higher: f64 = (r + 1..support.len())
            .map(|q| pi[q] * weights[q][seg.clone()].iter().sum::<f64>())
            .sum();
        let own: f64 = weights[r][seg].iter().sum();
        pi[r] = (observed - higher) / own;
        if pi[r] < -tol {
            return Err(Error::NegativeMass {
                threshold: support[r],
                value: pi[r],
            });
        }
    }
    // Entries within tolerance of zero are taken as absent.
    for x in pi.iter_mut() {
        if x.abs() <= tol {
            *x = 0.0;
        }
    }
    let total: f64 = pi.iter().sum();
    StrategyMix::new(
        support
            .iter()
            .zip(&pi)
            .map(|(&k, &x)| (Threshold::Finite(k), x / total)),
    )
}

/// Fractions explaining `obs` at `lambda`, with every level `0..=K` a candidate threshold.
pub fn reconstruct_mix(obs: &ObservedDistribution, lambda: f64, tol: f64) -> Result<StrategyMix> {
    let support: Vec<usize> = (0..=obs.top()).collect();
    reconstruct_on_support(obs, lambda, &support, tol)
}

fn explain(
    obs: &ObservedDistribution,
    lambda: f64,
    pi: StrategyMix,
    tol: &ToleranceConfig,
) -> Result<Explanation> {
    let rebuilt = build_from_mix(&pi, obs.mean(), tol.lambda_bisection_tol)?;
    Ok(Explanation {
        lambda,
        residual: l2_distance(&rebuilt.aggregate, obs.fractions()),
        support_size: pi.len(),
        top: obs.top(),
        pi,
        rebuilt,
    })
}

/// Largest average over maximal runs of ratios within relative `tol` of their running mean.
fn fitted_lambda(ratios: &[f64], tol: f64) -> f64 {
    let mut best = f64::NEG_INFINITY;
    let (mut sum, mut len) = (0.0, 0usize);
    for &r in ratios {
        if len > 0 && (r - sum / len as f64).abs() > tol * sum / len as f64 {
            best = best.max(sum / len as f64);
            sum = 0.0;
            len = 0;
        }
        sum += r;
        len += 1;
    }
    if len > 0 {
        best = best.max(sum / len as f64);
    }
    best
}

/// Explanation with the fewest thresholds, found from the drops in the ratio sequence.
///
/// `tol` is both the relative run tolerance on ratios and the slack allowed on
/// negative reconstructed fractions.
pub fn minimal_explanation(
    obs: &ObservedDistribution,
    tol: f64,
    tols: &ToleranceConfig,
) -> Result<Explanation> {
    let k = obs.top();
    if k == 0 || !obs.fully_supported() {
        return Err(Error::NoExplanation);
    }
    let ratios = obs.ratios();
    let lambda = fitted_lambda(&ratios, tol);
    let mut support: Vec<usize> = (1..=k)
        .filter(|&i| ratios[i - 1] < lambda * (1.0 - tol))
        .map(|i| i - 1)
        .collect();
    support.push(k);

    // Levels not yet in the support, strongest drop first.
    let mut candidates: Vec<usize> = (0..k).filter(|i| !support.contains(i)).collect();
    candidates.sort_by(|&a, &b| ratios[a].total_cmp(&ratios[b]));

    loop {
        match reconstruct_on_support(obs, lambda, &support, tol) {
            Ok(pi) => return explain(obs, lambda, pi, tols),
            Err(Error::NegativeMass { .. }) => {}
            Err(e) => return Err(e),
        }
        // Prefer the single addition that reconstructs with the smallest residual.
        let mut best: Option<(usize, Explanation)> = None;
        for (idx, &c) in candidates.iter().enumerate() {
            let mut trial = support.clone();
            trial.push(c);
            trial.sort_unstable();
            if let Ok(pi) = reconstruct_on_support(obs, lambda, &trial, tol) {
                let e = explain(obs, lambda, pi, tols)?;
                if best.as_ref().is_none_or(|(_, b)| e.residual < b.residual) {
                    best = Some((idx, e));
                }
            }
        }
        if let Some((_, e)) = best {
            return Ok(e);
        }
        if candidates.is_empty() {
            return Err(Error::NoExplanation);
        }
        support.push(candidates.remove(0));
        support.sort_unstable();
    }
}

/// One explanation attempt per `lambda`, computed in parallel.
pub fn enumerate_explanations(
    obs: &ObservedDistribution,
    lambdas: &[f64],
    tol: f64,
    tols: &ToleranceConfig,
) -> Vec<(f64, Result<Explanation>)> {
    lambdas
        .par_iter()
        .map(|&lambda| {
            (
                lambda,
                reconstruct_mix(obs, lambda, tol).and_then(|pi| explain(obs, lambda, pi, tols)),
            )
        })
        .collect()
}

/// Discount factors for which a type's best reply is a given threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeltaInterval {
    pub lo: f64,
    pub hi: f64,
}

impl DeltaInterval {
    pub fn contains(&self, delta: f64) -> bool {
        self.lo <= delta && delta <= self.hi
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

/// Finds the discount factors in `[DELTA_MIN, DELTA_MAX]` for which `k` is the
/// best threshold, holding the other parameters and the environment fixed.
///
/// The search runs over the per-round discount `delta^(1/n)`, where the best
/// threshold actually varies, and maps back. The endpoints are the outermost
/// probed values with best threshold `k`.
pub fn calibrate_type(
    k: usize,
    rates: &EnvironmentRates,
    beta: f64,
    rho: f64,
    alpha: f64,
    gamma: f64,
    tol: &ToleranceConfig,
) -> Result<DeltaInterval> {
    const WIDTH: f64 = 1e-12;
    AgentType::new(alpha, beta, gamma, 0.5, rho).validate()?;
    let n = rates.n as f64;
    let to_delta = |d: f64| d.powf(n).clamp(DELTA_MIN, DELTA_MAX);
    // Levels well above k only need to be recognized as such.
    let k_max = tol.k_max_initial.max(2 * k + 20);
    let tol = ToleranceConfig {
        k_max_initial: k_max,
        k_max_cap: k_max,
        ..*tol
    };

    let mut probes: Vec<(f64, usize)> = Vec::new();
    let mut eval = |d: f64| -> Result<usize> {
        let agent = AgentType::new(alpha, beta, gamma, to_delta(d), rho);
        let t = match best_threshold(&agent, rates, &tol) {
            Ok(t) => t,
            Err(Error::ThresholdUnbounded { .. }) => usize::MAX,
            Err(e) => return Err(e),
        };
        probes.push((d, t));
        Ok(t)
    };

    let (d_min, d_max) = (DELTA_MIN.powf(1.0 / n), DELTA_MAX.powf(1.0 / n));
    let low = eval(d_min)?;
    let high = eval(d_max)?;
    if low > k || high < k {
        return Err(Error::NoSolution { target: k });
    }
    // Smallest discount reaching k.
    let lo = if low == k {
        d_min
    } else {
        let (mut a, mut b) = (d_min, d_max);
        while b - a > WIDTH {
            let mid = 0.5 * (a + b);
            if eval(mid)? >= k {
                b = mid;
            } else {
                a = mid;
            }
        }
        b
    };
    if eval(lo)? != k {
        return Err(Error::NoSolution { target: k });
    }
    // Largest discount not exceeding k.
    let hi = if high == k {
        d_max
    } else {
        let (mut a, mut b) = (lo, d_max);
        while b - a > WIDTH {
            let mid = 0.5 * (a + b);
            if eval(mid)? <= k {
                a = mid;
            } else {
                b = mid;
            }
        }
        a
    };

    probes.sort_by(|x, y| x.0.total_cmp(&y.0));
    if let Some(w) = probes.windows(2).find(|w| w[1].1 < w[0].1) {
        return Err(Error::NonMonotoneCalibration {
            delta: to_delta(w[1].0),
            high: w[0].1,
            low: w[1].1,
        });
    }
    Ok(DeltaInterval {
        lo: to_delta(lo),
        hi: to_delta(hi),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maxent::build_from_mix;
    use approx::assert_abs_diff_eq;

    const TOL: f64 = 1e-6;

    fn single(k: usize, m: f64) -> (ObservedDistribution, f64) {
        let sol = build_from_mix(&StrategyMix::single(Threshold::Finite(k)), m, 1e-13).unwrap();
        (
            ObservedDistribution::from_solution(&sol).unwrap(),
            sol.lambda,
        )
    }

    #[test]
    fn observed_validation() {
        assert!(matches!(
            ObservedDistribution::new(vec![0.5, 0.4], None),
            Err(Error::FractionSum { .. })
        ));
        assert!(matches!(
            ObservedDistribution::new(vec![1.2, -0.2], None),
            Err(Error::ParameterRange { .. })
        ));
        let o = ObservedDistribution::new(vec![0.5, 0.0, 0.5, 0.0, 0.0], None).unwrap();
        assert_eq!(o.top(), 2);
        assert!(!o.fully_supported());
        assert_abs_diff_eq!(o.mean(), 1.0);
    }

    #[test]
    fn csv_input() {
        let text = "money,fraction\n0,0.5\n2,0.25\n1,0.25\n";
        let o = ObservedDistribution::from_csv(text.as_bytes()).unwrap();
        assert_eq!(o.fractions(), &[0.5, 0.25, 0.25]);
    }

    #[test]
    fn round_trip_single_threshold() {
        let (obs, lambda) = single(2, 0.5);
        assert_abs_diff_eq!(lambda, (-1.0 + 13f64.sqrt()) / 6.0, epsilon = 1e-12);
        let pi = reconstruct_mix(&obs, lambda, TOL).unwrap();
        assert_eq!(pi.support(), vec![Threshold::Finite(2)]);
        assert_abs_diff_eq!(pi.get(Threshold::Finite(2)), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn large_lambda_uses_every_level() {
        let (obs, lambda) = single(2, 0.5);
        let pi = reconstruct_mix(&obs, 10.0 * lambda, TOL).unwrap();
        assert_eq!(pi.len(), 3);
        assert!(pi.get(Threshold::Finite(0)) > 0.0 && pi.get(Threshold::Finite(1)) > 0.0);
    }

    #[test]
    fn small_lambda_fails() {
        let (obs, _) = single(2, 0.5);
        assert!(matches!(
            reconstruct_mix(&obs, 0.01, TOL),
            Err(Error::NegativeMass { .. })
        ));
    }

    #[test]
    fn reconstruction_matches_pointwise_recursion() {
        // Oracle: the textbook recursion with explicit lambda^j / Z_j.
        let obs = ObservedDistribution::new(vec![0.4, 0.3, 0.2, 0.1], None).unwrap();
        let lambda = 2.0;
        let z = |k: usize| (0..=k).map(|i| lambda_pow(lambda, i)).sum::<f64>();
        let mut pi = [0.0; 4];
        for j in (0..4).rev() {
            let above: f64 = (j + 1..4)
                .map(|l| pi[l] * lambda_pow(lambda, j) / z(l))
                .sum();
            pi[j] = (obs.fractions()[j] - above) * z(j) / lambda_pow(lambda, j);
        }
        let got = reconstruct_mix(&obs, lambda, TOL).unwrap();
        for (j, want) in pi.iter().enumerate() {
            assert_abs_diff_eq!(got.get(Threshold::Finite(j)), *want, epsilon = 1e-12);
        }
    }

    fn lambda_pow(lambda: f64, i: usize) -> f64 {
        lambda.powi(i as i32)
    }

    #[test]
    fn minimal_single_threshold() {
        let (obs, lambda) = single(5, 2.0);
        let e = minimal_explanation(&obs, TOL, &ToleranceConfig::default()).unwrap();
        assert_eq!(e.support(), vec![5]);
        assert_abs_diff_eq!(e.lambda, lambda, epsilon = 1e-9);
        assert!(e.residual < 1e-12);
    }

    #[test]
    fn minimal_two_thresholds() {
        let mix =
            StrategyMix::new([(Threshold::Finite(13), 0.7), (Threshold::Finite(20), 0.3)]).unwrap();
        let sol = build_from_mix(&mix, 4.0, 1e-13).unwrap();
        let obs = ObservedDistribution::from_solution(&sol).unwrap();
        let ratios = obs.ratios();
        let drops: Vec<usize> = (1..=20)
            .filter(|&i| ratios[i - 1] < sol.lambda * (1.0 - 1e-9))
            .collect();
        assert_eq!(drops, vec![14]);
        let e = minimal_explanation(&obs, TOL, &ToleranceConfig::default()).unwrap();
        assert_eq!(e.support(), vec![13, 20]);
        assert_abs_diff_eq!(e.pi.get(Threshold::Finite(13)), 0.7, epsilon = 1e-9);
        assert!(e.residual < 1e-9);
    }

    #[test]
    fn unsupported_observation_has_no_explanation() {
        let obs = ObservedDistribution::new(vec![0.5, 0.0, 0.5], None).unwrap();
        assert!(matches!(
            minimal_explanation(&obs, TOL, &ToleranceConfig::default()),
            Err(Error::NoExplanation)
        ));
        let point = ObservedDistribution::new(vec![1.0], None).unwrap();
        assert!(matches!(
            minimal_explanation(&point, TOL, &ToleranceConfig::default()),
            Err(Error::NoExplanation)
        ));
    }

    #[test]
    fn enumeration() {
        let (obs, lambda) = single(2, 0.5);
        let tols = ToleranceConfig::default();
        assert!(enumerate_explanations(&obs, &[], TOL, &tols).is_empty());
        let out = enumerate_explanations(&obs, &[lambda, 2.0, 4.0, 8.0], TOL, &tols);
        let ok: Vec<&Explanation> = out.iter().filter_map(|(_, r)| r.as_ref().ok()).collect();
        assert_eq!(ok.len(), 4);
        assert_eq!(ok[0].support(), vec![2]);
        for e in &ok {
            assert!(e.residual < 1e-9);
            assert_abs_diff_eq!(e.rebuilt.m, obs.mean(), epsilon = 1e-12);
            assert!(e.rebuilt.mean_residual() < 1e-9);
        }
        assert_ne!(ok[1].pi, ok[2].pi);
        assert_ne!(ok[2].pi, ok[3].pi);
    }

    #[test]
    fn fitted_lambda_averages_runs() {
        assert_abs_diff_eq!(fitted_lambda(&[0.5, 0.5, 0.2, 0.5], 1e-6), 0.5);
        assert_abs_diff_eq!(fitted_lambda(&[0.49, 0.51, 0.1], 0.05), 0.5);
    }

    fn rates() -> EnvironmentRates {
        EnvironmentRates::new(1000, 0.0, 0.1, 0.05)
    }

    #[test]
    fn calibrate_myopic_end() {
        let iv = calibrate_type(
            0,
            &rates(),
            1.0,
            1.0,
            0.05,
            1.0,
            &ToleranceConfig::default(),
        )
        .unwrap();
        assert!(iv.lo <= 1e-100);
        assert!(iv.hi > iv.lo);
    }

    #[test]
    fn calibrate_without_surplus_fails() {
        let err = calibrate_type(
            20,
            &rates(),
            1.0,
            1.0,
            1.0,
            1.0,
            &ToleranceConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NoSolution { target: 20 }));
    }

    #[test]
    fn calibrated_midpoint_gives_target() {
        let tol = ToleranceConfig::default();
        let iv = calibrate_type(10, &rates(), 1.0, 1.0, 0.05, 1.0, &tol).unwrap();
        assert!(iv.lo < iv.hi);
        let agent = AgentType::new(0.05, 1.0, 1.0, iv.midpoint(), 1.0);
        assert_eq!(best_threshold(&agent, &rates(), &tol).unwrap(), 10);
    }
}
