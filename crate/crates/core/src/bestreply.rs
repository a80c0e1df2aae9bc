//! Best replies against a mean-field environment and best-reply dynamics.
//!
//! A focal agent sees the rest of the system only through the max-ent
//! distribution induced by the current profile: the fraction `M_0` of agents
//! that cannot pay and the fraction `tau` that will not work. From those we get
//! per-round probabilities of requesting and of earning, and solve the agent's
//! single-dimensional Bellman problem over its own money holdings.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::maxent::{build_distribution, MaxEntSolution};
use crate::model::{AgentType, Population, StrategyProfile, ToleranceConfig};
use crate::welfare::{welfare_rate, WelfareReport};

/// Per-round probabilities faced by one agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnvironmentRates {
    pub n: usize,
    /// Fraction of requests satisfied for free.
    pub a: f64,
    pub m0: f64,
    pub tau: f64,
    /// Probability of being picked to request in a round, `1/n`.
    pub p_req: f64,
    /// Probability a volunteer is picked to do a paid job in a round.
    pub p_earn: f64,
}

impl EnvironmentRates {
    pub fn new(n: usize, a: f64, m0: f64, tau: f64) -> Self {
        let paid = (1.0 - a) * (1.0 - m0);
        let willing = n as f64 * (1.0 - tau);
        let p_earn = if willing > 0.0 {
            (paid / willing).clamp(0.0, 1.0)
        } else if paid > 0.0 {
            1.0
        } else {
            0.0
        };
        EnvironmentRates {
            n,
            a,
            m0,
            tau,
            p_req: 1.0 / n as f64,
            p_earn,
        }
    }

    pub fn from_solution(n: usize, a: f64, sol: &MaxEntSolution) -> Self {
        Self::new(n, a, sol.m0, sol.tau)
    }

    /// Per-round discount `delta^(1/n)` for `agent`.
    pub fn discount(&self, agent: &AgentType) -> f64 {
        agent.round_discount(self.n)
    }
}

pub fn environment_rates(
    p: &Population,
    profile: &StrategyProfile,
    m: f64,
    a: f64,
    tol: &ToleranceConfig,
) -> Result<EnvironmentRates> {
    Ok(environment(p, profile, m, a, tol)?.0)
}

fn environment(
    p: &Population,
    profile: &StrategyProfile,
    m: f64,
    a: f64,
    tol: &ToleranceConfig,
) -> Result<(EnvironmentRates, MaxEntSolution)> {
    p.require_payoff_heterogeneous()?;
    if !(0.0..1.0).contains(&a) {
        return Err(Error::ParameterRange {
            field: "a",
            value: a,
        });
    }
    let sol = build_distribution(p, profile, m, tol.lambda_bisection_tol)?;
    Ok((EnvironmentRates::from_solution(p.n(), a, &sol), sol))
}

/// Expected discounted utility by money level for one agent type.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueFunction {
    pub values: Vec<f64>,
    pub k_max: usize,
    pub iterations: usize,
    pub residual: f64,
}

impl ValueFunction {
    /// `V(i+1) - V(i)` for `i < k_max`.
    pub fn marginals(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.windows(2).map(|w| w[1] - w[0])
    }

    /// Largest increase between consecutive marginals; positive means V is not concave there.
    pub fn concavity_violation(&self) -> f64 {
        let marg: Vec<f64> = self.marginals().collect();
        marg.windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_nondecreasing(&self, slack: f64) -> bool {
        self.marginals().all(|d| d >= -slack)
    }
}

/// Solves the per-round Bellman equation of `agent` truncated at `k_max` dollars.
///
/// One round: with probability `p_req` the agent requests (free with
/// probability `a`, otherwise paid if it has a dollar); otherwise it may
/// volunteer and is picked for a paid job with probability `p_earn`:
///
/// ```text
/// V(i) = p_req R(i) + (1 - p_req) W(i)
/// R(i) = a (g + D V(i)) + (1 - a) (g + D V(i-1))      [i >= 1; D V(0) at i = 0]
/// W(i) = max(D V(i), p_earn (-alpha + D V(i+1)) + (1 - p_earn) D V(i))
/// ```
///
/// Sweeps are Gauss-Seidel with each action's self-loop solved in closed form,
/// alternating direction; convergence is judged on the residual of the
/// per-round operator above.
pub fn value_iteration(
    agent: &AgentType,
    rates: &EnvironmentRates,
    k_max: usize,
    tol: f64,
) -> Result<ValueFunction> {
    value_iteration_from(agent, rates, k_max, tol, None)
}

pub(crate) fn value_iteration_from(
    agent: &AgentType,
    rates: &EnvironmentRates,
    k_max: usize,
    tol: f64,
    warm: Option<&[f64]>,
) -> Result<ValueFunction> {
    let op = RoundOperator::new(agent, rates, k_max);

    let mut v = vec![0.0; k_max + 1];
    if let Some(w) = warm {
        let keep = w.len().min(v.len());
        v[..keep].copy_from_slice(&w[..keep]);
        if let Some(&last) = w.last() {
            v[keep..].iter_mut().for_each(|x| *x = last);
        }
    }

    let cap = iteration_cap(tol, op.disc);
    let mut residual = f64::INFINITY;
    for sweep in 1..=cap {
        if sweep % 2 == 1 {
            for i in 0..=k_max {
                v[i] = op.solved(&v, i);
            }
        } else {
            for i in (0..=k_max).rev() {
                v[i] = op.solved(&v, i);
            }
        }
        residual = op.residual(&v);
        if residual <= tol {
            return Ok(ValueFunction {
                values: v,
                k_max,
                iterations: sweep,
                residual,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: cap,
        residual,
    })
}

struct RoundOperator {
    disc: f64,
    p_req: f64,
    p_earn: f64,
    a: f64,
    alpha: f64,
    gamma: f64,
    k_max: usize,
}

impl RoundOperator {
    fn new(agent: &AgentType, rates: &EnvironmentRates, k_max: usize) -> Self {
        RoundOperator {
            disc: rates.discount(agent),
            p_req: rates.p_req,
            p_earn: rates.p_earn,
            a: rates.a,
            alpha: agent.alpha,
            gamma: agent.gamma,
            k_max,
        }
    }

    /// One application of the per-round operator at level `i`.
    fn apply(&self, v: &[f64], i: usize) -> f64 {
        let RoundOperator {
            disc,
            p_req,
            p_earn,
            a,
            alpha,
            gamma,
            k_max,
        } = *self;
        let stay = disc * v[i];
        let paid = if i >= 1 {
            gamma + disc * v[i - 1]
        } else {
            stay
        };
        let request = a * (gamma + stay) + (1.0 - a) * paid;
        let up = disc * v[(i + 1).min(k_max)];
        let work = p_earn * (up - alpha) + (1.0 - p_earn) * stay;
        p_req * request + (1.0 - p_req) * stay.max(work)
    }

    fn residual(&self, v: &[f64]) -> f64 {
        (0..v.len())
            .map(|i| (self.apply(v, i) - v[i]).abs())
            .fold(0.0, f64::max)
    }

    /// Value at `i` with the other levels held fixed and `V(i)` solved out of
    /// both sides, maximized over idling and working.
    fn solved(&self, v: &[f64], i: usize) -> f64 {
        let RoundOperator {
            disc,
            p_req,
            p_earn,
            a,
            alpha,
            gamma,
            k_max,
        } = *self;
        let mut self_w = p_req * a * disc;
        let mut base = p_req * a * gamma;
        if i >= 1 {
            base += p_req * (1.0 - a) * (gamma + disc * v[i - 1]);
        } else {
            self_w += p_req * (1.0 - a) * disc;
        }
        let rest = 1.0 - p_req;
        let idle = base / (1.0 - self_w - rest * disc);
        let work = if i < k_max {
            (base + rest * p_earn * (disc * v[i + 1] - alpha))
                / (1.0 - self_w - rest * (1.0 - p_earn) * disc)
        } else {
            (base - rest * p_earn * alpha) / (1.0 - self_w - rest * disc)
        };
        idle.max(work)
    }
}

fn iteration_cap(tol: f64, disc: f64) -> usize {
    let est = 10.0 * tol.ln() / disc.ln();
    if est.is_finite() {
        (est.ceil() as usize).max(10_000)
    } else {
        usize::MAX
    }
}

/// A best reply together with the diagnostics of the value function behind it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BestReply {
    pub threshold: usize,
    /// Truncation level that produced the answer.
    pub k_max: usize,
    pub concavity_violation: f64,
    #[serde(skip)]
    pub values: Vec<f64>,
}

/// Smallest money level at which working is not strictly profitable.
///
/// Ties go to not working, which yields the smaller of two adjacent best replies.
pub fn best_threshold(
    agent: &AgentType,
    rates: &EnvironmentRates,
    tol: &ToleranceConfig,
) -> Result<usize> {
    Ok(best_reply(agent, rates, tol, None)?.threshold)
}

pub fn best_reply(
    agent: &AgentType,
    rates: &EnvironmentRates,
    tol: &ToleranceConfig,
    warm: Option<&[f64]>,
) -> Result<BestReply> {
    let disc = rates.discount(agent);
    let mut k_max = tol.k_max_initial;
    loop {
        let vf = value_iteration_from(agent, rates, k_max, tol.value_iteration_tol, warm)?;
        // With p_earn = 0 both actions tie, and ties go to not working.
        let works =
            |i: usize| rates.p_earn > 0.0 && disc * (vf.values[i + 1] - vf.values[i]) > agent.alpha;
        let threshold = (0..k_max).find(|&i| !works(i)).unwrap_or(k_max);
        if threshold < k_max {
            if let Some(money) = (threshold..k_max).find(|&i| works(i)) {
                return Err(Error::NonThresholdReply { money });
            }
            return Ok(BestReply {
                threshold,
                k_max,
                concavity_violation: vf.concavity_violation(),
                values: vf.values,
            });
        }
        if k_max >= tol.k_max_cap {
            return Err(Error::ThresholdUnbounded { cap: tol.k_max_cap });
        }
        k_max = (k_max * 2).min(tol.k_max_cap);
    }
}

/// Componentwise best replies of all standard types to the environment induced by `profile`.
pub fn best_reply_profile(
    p: &Population,
    profile: &StrategyProfile,
    m: f64,
    a: f64,
    tol: &ToleranceConfig,
) -> Result<StrategyProfile> {
    let (rates, _) = environment(p, profile, m, a, tol)?;
    let replies = reply_all(p, &rates, tol, &vec![None; p.types().len()])?;
    Ok(StrategyProfile(
        replies.iter().map(|r| r.threshold).collect(),
    ))
}

fn reply_all(
    p: &Population,
    rates: &EnvironmentRates,
    tol: &ToleranceConfig,
    warm: &[Option<Vec<f64>>],
) -> Result<Vec<BestReply>> {
    p.types()
        .par_iter()
        .zip(warm.par_iter())
        .map(|(share, w)| best_reply(&share.agent, rates, tol, w.as_deref()))
        .collect()
}

/// Outcome of best-reply dynamics from the top profile.
#[derive(Debug, Clone, Serialize)]
pub struct EquilibriumResult {
    pub m: f64,
    pub a: f64,
    /// Greatest fixed point; all zeros when crashed.
    pub profile: StrategyProfile,
    /// Distribution at the fixed point; absent when the dynamics hit an infeasible profile.
    pub solution: Option<MaxEntSolution>,
    pub rates: Option<EnvironmentRates>,
    pub crashed: bool,
    /// Profiles visited, starting with the top profile.
    pub iterations: Vec<StrategyProfile>,
    pub welfare: WelfareReport,
}

impl EquilibriumResult {
    pub fn lambda(&self) -> Option<f64> {
        self.solution.as_ref().map(|s| s.lambda)
    }

    pub fn m0(&self) -> Option<f64> {
        self.solution.as_ref().map(|s| s.m0)
    }

    pub fn tau(&self) -> Option<f64> {
        self.solution.as_ref().map(|s| s.tau)
    }
}

/// Greatest-fixed-point equilibrium via best-reply dynamics.
///
/// Every type starts at `k_max_initial`, the finite stand-in for always
/// volunteering. If the first best reply exceeds that start, the start is
/// doubled. The visited profiles are componentwise non-increasing.
pub fn find_equilibrium(
    p: &Population,
    m: f64,
    a: f64,
    tol: &ToleranceConfig,
) -> Result<EquilibriumResult> {
    p.require_payoff_heterogeneous()?;
    if !(m > 0.0) {
        return Err(Error::ParameterRange {
            field: "m",
            value: m,
        });
    }
    if !(0.0..1.0).contains(&a) {
        return Err(Error::ParameterRange {
            field: "a",
            value: a,
        });
    }

    let n_types = p.types().len();
    if p.standard_fraction() <= 0.0 {
        let profile = StrategyProfile(vec![0; n_types]);
        let (rates, sol) = environment(p, &profile, m, a, tol)?;
        let welfare = welfare_rate(p, Some(&sol), &profile, a);
        return Ok(EquilibriumResult {
            m,
            a,
            profile: profile.clone(),
            solution: Some(sol),
            rates: Some(rates),
            crashed: false,
            iterations: vec![profile],
            welfare,
        });
    }

    let mut top = tol.k_max_initial;
    'restart: loop {
        let mut profile = StrategyProfile::uniform(n_types, top);
        let mut trace = vec![profile.clone()];
        let mut warm: Vec<Option<Vec<f64>>> = vec![None; n_types];
        loop {
            let (rates, sol) = match environment(p, &profile, m, a, tol) {
                Ok(env) => env,
                Err(Error::Infeasible { .. }) => return Ok(crashed(p, m, a, trace)),
                Err(e) => return Err(e),
            };
            let replies = reply_all(p, &rates, tol, &warm)?;
            let next = StrategyProfile(replies.iter().map(|r| r.threshold).collect());
            if next == profile {
                if profile.is_trivial() {
                    return Ok(crashed(p, m, a, trace));
                }
                let welfare = welfare_rate(p, Some(&sol), &profile, a);
                return Ok(EquilibriumResult {
                    m,
                    a,
                    profile,
                    solution: Some(sol),
                    rates: Some(rates),
                    crashed: false,
                    iterations: trace,
                    welfare,
                });
            }
            if !next.le(&profile) {
                if trace.len() == 1 && top < tol.k_max_cap {
                    top = (top * 2).min(tol.k_max_cap);
                    continue 'restart;
                }
                return Err(Error::NonMonotoneDynamics {
                    from: profile.joined(),
                    to: next.joined(),
                });
            }
            warm = replies.into_iter().map(|r| Some(r.values)).collect();
            trace.push(next.clone());
            profile = next;
        }
    }
}

fn crashed(p: &Population, m: f64, a: f64, iterations: Vec<StrategyProfile>) -> EquilibriumResult {
    let profile = StrategyProfile(vec![0; p.types().len()]);
    let welfare = welfare_rate(p, None, &profile, a);
    EquilibriumResult {
        m,
        a,
        profile,
        solution: None,
        rates: None,
        crashed: true,
        iterations,
        welfare,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TypeShare;
    use approx::assert_abs_diff_eq;

    fn two_type_population() -> Population {
        Population::new(
            vec![
                TypeShare {
                    agent: AgentType::new(0.05, 1.0, 1.0, 0.95, 1.0),
                    fraction: 0.3,
                },
                TypeShare {
                    agent: AgentType::new(0.15, 1.0, 1.0, 0.95, 1.0),
                    fraction: 0.7,
                },
            ],
            1000,
        )
        .unwrap()
    }

    #[test]
    fn uniform_case_rates() {
        let p = Population::homogeneous(AgentType::new(0.05, 1.0, 1.0, 0.95, 1.0), 1000).unwrap();
        let r = environment_rates(
            &p,
            &StrategyProfile(vec![4]),
            2.0,
            0.0,
            &ToleranceConfig::default(),
        )
        .unwrap();
        assert_abs_diff_eq!(r.m0, 0.2, epsilon = 1e-9);
        assert_abs_diff_eq!(r.tau, 0.2, epsilon = 1e-9);
        assert_abs_diff_eq!(r.p_earn, 1e-3, epsilon = 1e-12);
        assert_abs_diff_eq!(r.p_req, 1e-3, epsilon = 1e-18);
    }

    #[test]
    fn earning_rate_limits() {
        let r = EnvironmentRates::new(1000, 0.0, 0.0, 0.0);
        assert_abs_diff_eq!(r.p_earn, 1e-3, epsilon = 1e-15);
        let half = EnvironmentRates::new(1000, 0.5, 0.3, 0.1);
        let none = EnvironmentRates::new(1000, 0.0, 0.3, 0.1);
        assert_abs_diff_eq!(half.p_earn / none.p_earn, 0.5, epsilon = 1e-12);
        assert_eq!(EnvironmentRates::new(10, 0.0, 0.5, 1.0).p_earn, 1.0);
    }

    #[test]
    fn rejects_beta_heterogeneous() {
        let p = Population::new(
            vec![
                TypeShare {
                    agent: AgentType::new(0.05, 1.0, 1.0, 0.95, 1.0),
                    fraction: 0.5,
                },
                TypeShare {
                    agent: AgentType::new(0.05, 0.5, 1.0, 0.95, 1.0),
                    fraction: 0.5,
                },
            ],
            100,
        )
        .unwrap();
        let r = environment_rates(
            &p,
            &StrategyProfile(vec![3, 3]),
            1.0,
            0.0,
            &ToleranceConfig::default(),
        );
        assert!(matches!(r, Err(Error::NotPayoffHeterogeneous)));
        assert!(matches!(
            find_equilibrium(&p, 1.0, 0.0, &ToleranceConfig::default()),
            Err(Error::NotPayoffHeterogeneous)
        ));
    }

    #[test]
    fn myopic_agent_never_works() {
        let t = AgentType::new(0.05, 1.0, 1.0, 1e-9, 1.0);
        let r = EnvironmentRates::new(1000, 0.0, 0.2, 0.2);
        assert_eq!(
            best_threshold(&t, &r, &ToleranceConfig::default()).unwrap(),
            0
        );
    }

    #[test]
    fn no_earning_means_no_working() {
        let t = AgentType::new(0.05, 1.0, 1.0, 0.95, 1.0);
        let r = EnvironmentRates {
            p_earn: 0.0,
            ..EnvironmentRates::new(1000, 0.0, 0.2, 0.2)
        };
        let vf = value_iteration(&t, &r, 50, 1e-10).unwrap();
        assert!(vf.is_nondecreasing(1e-9));
        assert_eq!(
            best_threshold(&t, &r, &ToleranceConfig::default()).unwrap(),
            0
        );
    }

    #[test]
    fn value_function_is_monotone_and_concave_in_two_type_environment() {
        let p = two_type_population();
        let tol = ToleranceConfig::default();
        let r = environment_rates(&p, &StrategyProfile(vec![20, 13]), 4.0, 0.0, &tol).unwrap();
        let vf = value_iteration(&p.types()[0].agent, &r, 200, tol.value_iteration_tol).unwrap();
        assert!(vf.residual <= tol.value_iteration_tol);
        assert!(vf.is_nondecreasing(1e-9));
        assert!(
            vf.concavity_violation() <= 1e-9,
            "{}",
            vf.concavity_violation()
        );
    }

    #[test]
    fn trivial_profile_is_infeasible() {
        let p = two_type_population();
        let r = best_reply_profile(
            &p,
            &StrategyProfile(vec![0, 0]),
            1.0,
            0.0,
            &ToleranceConfig::default(),
        );
        assert!(matches!(r, Err(Error::Infeasible { .. })));
    }

    #[test]
    fn all_hoarders_is_not_a_crash() {
        let p = Population::with_nonstandard(vec![], 100, 0.0, 0.0, None);
        assert!(p.is_err());
        let t = AgentType::new(0.05, 1.0, 1.0, 0.95, 1.0);
        let p = Population::with_nonstandard(
            vec![TypeShare {
                agent: t,
                fraction: 0.0,
            }],
            100,
            0.9,
            0.1,
            None,
        )
        .unwrap();
        let eq = find_equilibrium(&p, 2.0, 0.0, &ToleranceConfig::default()).unwrap();
        assert!(!eq.crashed);
        assert_eq!(eq.welfare.per_round, 0.0);
    }
}
