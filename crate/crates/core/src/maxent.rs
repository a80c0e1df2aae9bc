//! Maximum-entropy distribution of money for a fixed strategy mix.
//!
//! Agents playing `S_k` hold `i` dollars with population fraction
//! `pi_k * lambda^i / Z_k(lambda)`, `Z_k = sum_{j<=k} lambda^j`, where the single
//! parameter `lambda` is fixed by the average-money constraint. Hoarders
//! (`S_inf`) get the untruncated geometric row, which needs `lambda < 1`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{profile_to_mix, Population, StrategyMix, StrategyProfile, Threshold};

/// Hoarder rows are materialized until the remaining tail mass falls below this.
pub const HOARDER_TAIL_MASS: f64 = 1e-12;

/// Conditional distribution `lambda^i / Z_k(lambda)` over `0..=k`.
///
/// Summed directly, in reversed powers when `lambda > 1`, so `lambda = 1` needs
/// no special case and large `lambda` does not overflow.
pub fn row_weights(k: usize, lambda: f64) -> Vec<f64> {
    let mut w = vec![0.0; k + 1];
    if lambda <= 1.0 {
        let mut x = 1.0;
        for wi in w.iter_mut() {
            *wi = x;
            x *= lambda;
        }
    } else {
        let inv = 1.0 / lambda;
        let mut x = 1.0;
        for wi in w.iter_mut().rev() {
            *wi = x;
            x *= inv;
        }
    }
    let z: f64 = w.iter().sum();
    w.iter_mut().for_each(|wi| *wi /= z);
    w
}

/// Conditional mean money `mu_k(lambda)` of an agent playing `S_k`.
pub fn mean_money_for_threshold(k: Threshold, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::ParameterRange {
            field: "lambda",
            value: lambda,
        });
    }
    match k {
        Threshold::Finite(k) => Ok(finite_mean(k, lambda)),
        Threshold::Infinite if lambda < 1.0 => Ok(lambda / (1.0 - lambda)),
        Threshold::Infinite => Err(Error::DivergentMean { lambda }),
    }
}

fn finite_mean(k: usize, lambda: f64) -> f64 {
    row_weights(k, lambda)
        .iter()
        .enumerate()
        .map(|(i, w)| i as f64 * w)
        .sum()
}

/// `sum_k pi_k mu_k(lambda)`; the caller guarantees `lambda < 1` when hoarders are present.
fn mix_mean(mix: &StrategyMix, lambda: f64) -> f64 {
    mix.iter()
        .map(|(k, pi)| match k {
            Threshold::Finite(k) => pi * finite_mean(k, lambda),
            Threshold::Infinite => pi * lambda / (1.0 - lambda),
        })
        .sum()
}

/// Finds the unique `lambda` with `sum_k pi_k mu_k(lambda) = m` by bisection.
///
/// The result satisfies `|mean - m| <= tol * (1 + m)` unless the bracket has
/// collapsed to adjacent floating-point values first.
pub fn solve_lambda(mix: &StrategyMix, m: f64, tol: f64) -> Result<f64> {
    let max = mix.max_mean();
    if !(m > 0.0) || !(m < max) {
        return Err(Error::Infeasible { m, max });
    }
    let bounded = mix.hoarder_mass() > 0.0;
    let target = |lambda: f64| mix_mean(mix, lambda) - m;
    let tol = tol * (1.0 + m);

    let mut lo = 1.0_f64;
    let mut hi = 1.0_f64;
    if bounded {
        lo = 0.5;
        hi = 0.5;
    }
    while target(lo) >= 0.0 {
        lo *= 0.5;
        if lo < f64::MIN_POSITIVE {
            return Err(Error::Infeasible { m, max });
        }
    }
    loop {
        if target(hi) > 0.0 {
            break;
        }
        hi = if bounded {
            1.0 - 0.5 * (1.0 - hi)
        } else {
            hi * 2.0
        };
        if (bounded && hi >= 1.0) || hi > 1e300 {
            return Err(Error::Infeasible { m, max });
        }
    }

    let mut mid = 0.5 * (lo + hi);
    for _ in 0..2000 {
        mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let r = target(mid);
        if r.abs() <= tol {
            break;
        }
        if r < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(mid)
}

/// Money distribution of the agents playing one threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaxEntRow {
    pub threshold: Threshold,
    /// `pi_k`, the row total.
    pub mass: f64,
    /// `M^k_i` for `i = 0..`; hoarder rows are truncated at [`HOARDER_TAIL_MASS`].
    pub fractions: Vec<f64>,
}

impl MaxEntRow {
    pub fn at(&self, money: usize) -> f64 {
        self.fractions.get(money).copied().unwrap_or(0.0)
    }

    /// Mass sitting exactly at the row's own threshold (0 for hoarders).
    pub fn at_threshold(&self) -> f64 {
        match self.threshold {
            Threshold::Finite(k) => self.at(k),
            Threshold::Infinite => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaxEntSolution {
    pub lambda: f64,
    pub m: f64,
    /// One row per threshold in the mix, ascending.
    pub rows: Vec<MaxEntRow>,
    /// `M_i = sum_k M^k_i`.
    pub aggregate: Vec<f64>,
    pub m0: f64,
    pub tau: f64,
}

impl MaxEntSolution {
    pub fn row(&self, k: Threshold) -> Option<&MaxEntRow> {
        self.rows.iter().find(|r| r.threshold == k)
    }

    /// Residual of the average-money constraint, computed analytically for hoarder rows.
    pub fn mean_residual(&self) -> f64 {
        let mix = StrategyMix::from_entries_unchecked(
            self.rows.iter().map(|r| (r.threshold, r.mass)).collect(),
        );
        (mix_mean(&mix, self.lambda) - self.m).abs()
    }

    /// Per-type money distributions (fractions of the money-holding population),
    /// obtained by splitting each threshold row over the types sharing it in
    /// proportion to their population share.
    pub fn type_rows(&self, p: &Population, profile: &StrategyProfile) -> Vec<Vec<f64>> {
        let moneyed = p.moneyed_fraction();
        p.types()
            .iter()
            .zip(profile.thresholds())
            .map(|(share, &k)| match self.row(Threshold::Finite(k)) {
                Some(row) if row.mass > 0.0 => {
                    let scale = share.fraction / moneyed / row.mass;
                    row.fractions.iter().map(|x| x * scale).collect()
                }
                _ => vec![0.0; k + 1],
            })
            .collect()
    }
}

/// Max-ent distribution for a strategy mix directly.
pub fn build_from_mix(mix: &StrategyMix, m: f64, tol: f64) -> Result<MaxEntSolution> {
    let lambda = solve_lambda(mix, m, tol)?;
    Ok(assemble(mix, m, lambda))
}

/// Max-ent distribution for a mix at a given `lambda`, without re-solving.
pub(crate) fn assemble(mix: &StrategyMix, m: f64, lambda: f64) -> MaxEntSolution {
    let rows: Vec<MaxEntRow> = mix
        .iter()
        .map(|(threshold, mass)| {
            let fractions = match threshold {
                Threshold::Finite(k) => row_weights(k, lambda)
                    .into_iter()
                    .map(|w| mass * w)
                    .collect(),
                Threshold::Infinite => hoarder_row(mass, lambda),
            };
            MaxEntRow {
                threshold,
                mass,
                fractions,
            }
        })
        .collect();

    let len = rows.iter().map(|r| r.fractions.len()).max().unwrap_or(0);
    let mut aggregate = vec![0.0; len];
    for row in &rows {
        for (a, x) in aggregate.iter_mut().zip(&row.fractions) {
            *a += x;
        }
    }
    let m0 = aggregate.first().copied().unwrap_or(0.0);
    let tau = rows.iter().map(MaxEntRow::at_threshold).sum();
    MaxEntSolution {
        lambda,
        m,
        rows,
        aggregate,
        m0,
        tau,
    }
}

fn hoarder_row(mass: f64, lambda: f64) -> Vec<f64> {
    // Tail beyond index L carries mass * lambda^L.
    let len = if lambda <= 0.0 {
        1
    } else {
        ((HOARDER_TAIL_MASS / mass).ln() / lambda.ln())
            .ceil()
            .max(1.0) as usize
    };
    let mut row = Vec::with_capacity(len);
    let mut x = mass * (1.0 - lambda);
    for _ in 0..len {
        row.push(x);
        x *= lambda;
    }
    row
}

/// Max-ent distribution induced by a population playing `profile` with average money `m`
/// per money-holding agent.
pub fn build_distribution(
    p: &Population,
    profile: &StrategyProfile,
    m: f64,
    tol: f64,
) -> Result<MaxEntSolution> {
    let mix = profile_to_mix(p, profile)?;
    build_from_mix(&mix, m, tol)
}

/// Shannon entropy (natural log) of the joint threshold/money table.
pub fn entropy_of(sol: &MaxEntSolution) -> f64 {
    sol.rows
        .iter()
        .flat_map(|r| r.fractions.iter())
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.ln())
        .sum()
}
