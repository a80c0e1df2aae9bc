//! Social welfare of an equilibrium, the monetary-crash threshold, and sweeps
//! over money supply, altruist share and hoarder share.

use rayon::prelude::*;
use serde::Serialize;

use crate::bestreply::{find_equilibrium, EnvironmentRates, EquilibriumResult};
use crate::error::{Error, Result};
use crate::maxent::MaxEntSolution;
use crate::model::{Population, StrategyProfile, Threshold, ToleranceConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WelfareReport {
    /// Expected welfare gained per round.
    pub per_round: f64,
    /// `per_round / (1 - delta)`, only when every standard type shares `delta`.
    pub normalized_total: Option<f64>,
    /// Expected utility of one agent of each standard type per unit time (`n` rounds).
    pub per_type_utility: Vec<f64>,
    /// Share-weighted mean of `per_type_utility`.
    pub standard_utility: f64,
}

/// Expected welfare per round for a population at the distribution `sol`.
///
/// `sol = None` means no paid trade happens (the trivial equilibrium), leaving
/// only free service. Paid jobs are charged the average cost of the willing
/// pool; hoarders in the pool cost `hoarder_type.alpha` (0 if unset).
pub fn welfare_rate(
    p: &Population,
    sol: Option<&MaxEntSolution>,
    profile: &StrategyProfile,
    a: f64,
) -> WelfareReport {
    let moneyed = p.moneyed_fraction();
    let shares: Vec<f64> = p.types().iter().map(|t| t.fraction / moneyed).collect();
    let gammas: Vec<f64> = p.types().iter().map(|t| t.agent.gamma).collect();
    let free: f64 = shares.iter().zip(&gammas).map(|(f, g)| a * f * g).sum();

    let (per_round, per_type_utility) = match sol {
        None => (free, gammas.iter().map(|g| a * g).collect()),
        Some(sol) => {
            let rows = sol.type_rows(p, profile);
            let at_zero: Vec<f64> = rows
                .iter()
                .map(|r| r.first().copied().unwrap_or(0.0))
                .collect();
            let willing: Vec<f64> = rows
                .iter()
                .zip(profile.thresholds())
                .zip(&shares)
                .map(|((r, &k), f)| f - r.get(k).copied().unwrap_or(0.0))
                .collect();
            let hoarder_willing = sol.row(Threshold::Infinite).map_or(0.0, |r| r.mass);
            let hoarder_alpha = p.hoarder_type().map_or(0.0, |h| h.alpha);

            let pool: f64 = willing.iter().sum::<f64>() + hoarder_willing;
            let pool_cost: f64 = willing
                .iter()
                .zip(p.types())
                .map(|(w, t)| w * t.agent.alpha)
                .sum::<f64>()
                + hoarder_willing * hoarder_alpha;
            let mean_cost = if pool > 0.0 { pool_cost / pool } else { 0.0 };

            let paying: Vec<f64> = shares.iter().zip(&at_zero).map(|(f, z)| f - z).collect();
            let paid_gain: f64 = paying.iter().zip(&gammas).map(|(x, g)| x * g).sum();
            let paid = if pool > 0.0 {
                paid_gain - paying.iter().sum::<f64>() * mean_cost
            } else {
                0.0
            };
            let per_round = free + (1.0 - a) * paid;

            let rates = EnvironmentRates::from_solution(p.n(), a, sol);
            let jobs_per_willing = rates.p_earn * p.n() as f64;
            let utility = p
                .types()
                .iter()
                .enumerate()
                .map(|(t, share)| {
                    let f = shares[t];
                    if f <= 0.0 {
                        return 0.0;
                    }
                    let g = share.agent.gamma;
                    let served = a * g + (1.0 - a) * (1.0 - at_zero[t] / f) * g;
                    served - share.agent.alpha * jobs_per_willing * willing[t] / f
                })
                .collect();
            (per_round, utility)
        }
    };

    let standard: f64 = shares.iter().sum();
    let standard_utility = if standard > 0.0 {
        shares
            .iter()
            .zip(&per_type_utility)
            .map(|(f, u)| f * u)
            .sum::<f64>()
            / standard
    } else {
        0.0
    };
    WelfareReport {
        per_round,
        normalized_total: p.common_delta().map(|d| per_round / (1.0 - d)),
        per_type_utility,
        standard_utility,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CrashStatus {
    /// `m_crash` lies inside `bracket`.
    Bracketed,
    /// Not even a small money supply supports a nontrivial equilibrium.
    NoNontrivialEquilibrium,
    /// Hoarders absorb money and no crash was found up to the cap.
    HoarderStabilized,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrashSearchResult {
    pub status: CrashStatus,
    /// Midpoint of the final bracket; 0 when no nontrivial equilibrium exists, the cap when stabilized.
    pub m_crash: f64,
    /// `(m with a nontrivial equilibrium, m that crashed)`.
    pub bracket: Option<(f64, f64)>,
    pub evaluations: usize,
}

/// Money supply probed first when looking for a nontrivial equilibrium.
pub const CRASH_PROBE_START: f64 = 0.25;
/// Default upper limit of the crash search.
pub const CRASH_SEARCH_CAP: f64 = 64.0;

/// Binary search for the monetary-crash threshold.
pub fn crash_threshold(
    p: &Population,
    a: f64,
    width: f64,
    cap: f64,
    tol: &ToleranceConfig,
) -> Result<CrashSearchResult> {
    p.require_payoff_heterogeneous()?;
    if !(width > 0.0) {
        return Err(Error::ParameterRange {
            field: "width",
            value: width,
        });
    }
    let mut evaluations = 0;
    let mut crashes = |m: f64| -> Result<bool> {
        evaluations += 1;
        let eq = find_equilibrium(p, m, a, tol)?;
        Ok(eq.crashed || eq.profile.is_trivial())
    };

    if crashes(CRASH_PROBE_START)? {
        return Ok(CrashSearchResult {
            status: CrashStatus::NoNontrivialEquilibrium,
            m_crash: 0.0,
            bracket: None,
            evaluations: 1,
        });
    }

    let mut lo = CRASH_PROBE_START;
    let mut hi = lo;
    loop {
        if hi >= cap {
            if p.hoarder_fraction() > 0.0 {
                return Ok(CrashSearchResult {
                    status: CrashStatus::HoarderStabilized,
                    m_crash: cap,
                    bracket: None,
                    evaluations,
                });
            }
            return Err(Error::NoUpperBound { cap });
        }
        hi = (hi * 2.0).min(cap);
        if crashes(hi)? {
            break;
        }
        lo = hi;
    }
    while hi - lo > width {
        let mid = 0.5 * (lo + hi);
        if crashes(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(CrashSearchResult {
        status: CrashStatus::Bracketed,
        m_crash: 0.5 * (lo + hi),
        bracket: Some((lo, hi)),
        evaluations,
    })
}

/// One row of a sweep: the swept value and the equilibrium found there.
#[derive(Debug)]
pub struct SweepRow {
    pub x: f64,
    pub outcome: Result<EquilibriumResult>,
}

impl SweepRow {
    pub fn crashed(&self) -> bool {
        self.outcome.as_ref().map_or(true, |e| e.crashed)
    }
}

fn check_grid(grid: &[f64], lo: f64, hi: f64, field: &'static str) -> Result<()> {
    for &x in grid {
        if !(x >= lo && x < hi) {
            return Err(Error::ParameterRange { field, value: x });
        }
    }
    if let Some(w) = grid.windows(2).find(|w| w[1] <= w[0]) {
        return Err(Error::ParameterRange { field, value: w[1] });
    }
    Ok(())
}

/// Greatest-fixed-point equilibrium at every money supply in `m_grid`.
pub fn sweep_money(
    p: &Population,
    a: f64,
    m_grid: &[f64],
    tol: &ToleranceConfig,
) -> Result<Vec<SweepRow>> {
    check_grid(m_grid, f64::MIN_POSITIVE, f64::INFINITY, "m")?;
    Ok(m_grid
        .par_iter()
        .map(|&m| SweepRow {
            x: m,
            outcome: find_equilibrium(p, m, a, tol),
        })
        .collect())
}

/// Equilibrium at fixed money supply for every free-service fraction in `a_grid`.
pub fn sweep_altruists(
    p: &Population,
    m: f64,
    a_grid: &[f64],
    tol: &ToleranceConfig,
) -> Result<Vec<SweepRow>> {
    check_grid(a_grid, 0.0, 1.0, "a")?;
    Ok(a_grid
        .par_iter()
        .map(|&a| SweepRow {
            x: a,
            outcome: find_equilibrium(p, m, a, tol),
        })
        .collect())
}

/// Equilibrium at fixed money supply for every hoarder share in `fh_grid`;
/// standard shares are rescaled to the remaining mass.
pub fn sweep_hoarders(
    p_base: &Population,
    m: f64,
    fh_grid: &[f64],
    tol: &ToleranceConfig,
) -> Result<Vec<SweepRow>> {
    check_grid(fh_grid, 0.0, 1.0, "fH")?;
    Ok(fh_grid
        .par_iter()
        .map(|&fh| SweepRow {
            x: fh,
            outcome: p_base
                .with_hoarder_fraction(fh)
                .and_then(|p| find_equilibrium(&p, m, 0.0, tol)),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maxent::build_from_mix;
    use crate::model::{AgentType, StrategyMix, TypeShare};
    use approx::assert_abs_diff_eq;

    #[test]
    fn homogeneous_formula() {
        // lambda = 1 on 0..=1 puts half the agents at $0.
        let t = AgentType::new(0.05, 1.0, 1.0, 0.95, 1.0);
        let p = Population::homogeneous(t, 1000).unwrap();
        let profile = StrategyProfile(vec![1]);
        let sol = build_from_mix(&StrategyMix::single(Threshold::Finite(1)), 0.5, 1e-12).unwrap();
        assert_abs_diff_eq!(sol.m0, 0.5, epsilon = 1e-9);
        let w = welfare_rate(&p, Some(&sol), &profile, 0.0);
        assert_abs_diff_eq!(w.per_round, 0.475, epsilon = 1e-9);
        assert_abs_diff_eq!(w.normalized_total.unwrap(), 9.5, epsilon = 1e-7);
    }

    #[test]
    fn trivial_profile_has_only_free_service() {
        let t = AgentType::new(0.05, 1.0, 1.0, 0.95, 1.0);
        let p = Population::homogeneous(t, 1000).unwrap();
        let w = welfare_rate(&p, None, &StrategyProfile(vec![0]), 0.0);
        assert_eq!(w.per_round, 0.0);
        let w = welfare_rate(&p, None, &StrategyProfile(vec![0]), 0.3);
        assert_abs_diff_eq!(w.per_round, 0.3, epsilon = 1e-15);
    }

    #[test]
    fn all_free_service() {
        let t = AgentType::new(0.05, 1.0, 1.0, 0.95, 1.0);
        let p = Population::homogeneous(t, 1000).unwrap();
        let sol = build_from_mix(&StrategyMix::single(Threshold::Finite(4)), 2.0, 1e-12).unwrap();
        let w = welfare_rate(&p, Some(&sol), &StrategyProfile(vec![4]), 1.0);
        assert_abs_diff_eq!(w.normalized_total.unwrap(), 20.0, epsilon = 1e-9);
    }

    #[test]
    fn heterogeneous_delta_has_no_normalized_total() {
        let p = Population::new(
            vec![
                TypeShare {
                    agent: AgentType::new(0.05, 1.0, 1.0, 0.95, 1.0),
                    fraction: 0.5,
                },
                TypeShare {
                    agent: AgentType::new(0.05, 1.0, 1.0, 0.9, 1.0),
                    fraction: 0.5,
                },
            ],
            100,
        )
        .unwrap();
        let w = welfare_rate(&p, None, &StrategyProfile(vec![0, 0]), 0.0);
        assert!(w.normalized_total.is_none());
    }

    #[test]
    fn welfare_decreases_with_zero_money_mass() {
        let t = AgentType::new(0.05, 1.0, 1.0, 0.95, 1.0);
        let p = Population::homogeneous(t, 1000).unwrap();
        let profile = StrategyProfile(vec![6]);
        let mix = StrategyMix::single(Threshold::Finite(6));
        let mut last = f64::INFINITY;
        for m in [5.0, 4.0, 3.0, 2.0, 1.0, 0.5] {
            let sol = build_from_mix(&mix, m, 1e-12).unwrap();
            let w = welfare_rate(&p, Some(&sol), &profile, 0.0);
            assert_abs_diff_eq!(w.per_round, (1.0 - sol.m0) * 0.95, epsilon = 1e-12);
            assert!(w.per_round < last);
            last = w.per_round;
        }
    }

    #[test]
    fn myopic_population_has_no_nontrivial_equilibrium() {
        let t = AgentType::new(0.05, 1.0, 1.0, 1e-9, 1.0);
        let p = Population::homogeneous(t, 1000).unwrap();
        let r =
            crash_threshold(&p, 0.0, 0.05, CRASH_SEARCH_CAP, &ToleranceConfig::default()).unwrap();
        assert_eq!(r.status, CrashStatus::NoNontrivialEquilibrium);
        assert_eq!(r.m_crash, 0.0);
    }

    #[test]
    fn grids_must_increase() {
        let t = AgentType::new(0.05, 1.0, 1.0, 0.95, 1.0);
        let p = Population::homogeneous(t, 1000).unwrap();
        let tol = ToleranceConfig::default();
        assert!(sweep_money(&p, 0.0, &[1.0, 1.0], &tol).is_err());
        assert!(sweep_altruists(&p, 1.0, &[0.5, 1.0], &tol).is_err());
        assert!(sweep_money(&p, 0.0, &[], &tol).unwrap().is_empty());
    }
}
