//! Exact Markov chain of the money allocation for tiny systems.
//!
//! States are allocations reachable from an initial one; transition
//! probabilities are exact rationals, so symmetry of the chain can be checked
//! with zero tolerance.

use std::collections::{HashMap, VecDeque};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

use crate::error::{Error, Result};
use crate::model::{Population, StrategyProfile};

/// Default cap on the number of reachable states.
pub const STATE_LIMIT: usize = 1_000_000;

/// Largest chain solved by exact elimination when it is not symmetric.
const ELIMINATION_LIMIT: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainAgent {
    pub beta: f64,
    pub rho: f64,
    pub threshold: usize,
}

#[derive(Debug, Clone)]
pub struct ExactChainResult {
    pub agents: Vec<ChainAgent>,
    pub total_money: usize,
    /// Reachable allocations; the first is the initial one.
    pub states: Vec<Vec<usize>>,
    /// Sparse rows `(target, probability)` sorted by target, self-loops included.
    pub transitions: Vec<Vec<(usize, BigRational)>>,
    pub stationary: Vec<BigRational>,
    /// max |P(s,s') - P(s',s)|.
    pub symmetry_residual: BigRational,
    /// max |(stationary P)(s) - stationary(s)|.
    pub stationary_residual: BigRational,
    /// Per agent, stationary probability of holding each amount.
    pub agent_marginals: Vec<Vec<BigRational>>,
    /// Agent-averaged money distribution.
    pub marginal: Vec<BigRational>,
}

impl ExactChainResult {
    pub fn is_symmetric(&self) -> bool {
        self.symmetry_residual.is_zero()
    }

    /// The stationary vector satisfies `x P = x` exactly.
    pub fn stationary_is_exact(&self) -> bool {
        self.stationary_residual.is_zero()
    }

    pub fn is_uniform(&self) -> bool {
        let u = BigRational::new(BigInt::one(), BigInt::from(self.states.len()));
        self.stationary.iter().all(|x| *x == u)
    }

    pub fn transition(&self, from: usize, to: usize) -> BigRational {
        lookup(&self.transitions[from], to)
    }

    /// Dense transition matrix.
    pub fn matrix(&self) -> Vec<Vec<BigRational>> {
        let n = self.states.len();
        self.transitions
            .iter()
            .map(|row| {
                let mut dense = vec![BigRational::zero(); n];
                for (j, p) in row {
                    dense[*j] = p.clone();
                }
                dense
            })
            .collect()
    }

    pub fn marginal_f64(&self) -> Vec<f64> {
        self.marginal.iter().map(to_f64).collect()
    }
}

fn to_f64(x: &BigRational) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

fn rational(x: f64) -> Result<BigRational> {
    BigRational::from_float(x).ok_or(Error::ParameterRange {
        field: "beta",
        value: x,
    })
}

fn lookup(row: &[(usize, BigRational)], to: usize) -> BigRational {
    match row.binary_search_by_key(&to, |(j, _)| *j) {
        Ok(pos) => row[pos].1.clone(),
        Err(_) => BigRational::zero(),
    }
}

/// Builds the chain for a population realized as `n` explicit standard agents.
pub fn exact_chain(
    p: &Population,
    profile: &StrategyProfile,
    total_money: usize,
) -> Result<ExactChainResult> {
    p.require_payoff_heterogeneous()?;
    if p.hoarder_fraction() > 0.0 || p.altruist_fraction() > 0.0 {
        return Err(Error::Config(
            "the exact chain covers standard agents only".into(),
        ));
    }
    if profile.len() != p.types().len() {
        return Err(Error::Config(format!(
            "{} thresholds for {} types",
            profile.len(),
            p.types().len()
        )));
    }
    let shares: Vec<f64> = p.types().iter().map(|t| t.fraction).collect();
    let counts = super::apportion(&shares, p.n());
    let mut agents = Vec::with_capacity(p.n());
    for (t, share) in p.types().iter().enumerate() {
        for _ in 0..counts[t] {
            agents.push(ChainAgent {
                beta: share.agent.beta,
                rho: share.agent.rho,
                threshold: profile.thresholds()[t],
            });
        }
    }
    exact_chain_agents(&agents, total_money, STATE_LIMIT)
}

/// Builds the chain for explicit agents. Agents must share `beta` and `rho`.
pub fn exact_chain_agents(
    agents: &[ChainAgent],
    total_money: usize,
    limit: usize,
) -> Result<ExactChainResult> {
    if let Some(first) = agents.first() {
        if agents
            .iter()
            .any(|a| a.beta != first.beta || a.rho != first.rho)
        {
            return Err(Error::NotPayoffHeterogeneous);
        }
    }
    build_chain(agents, total_money, limit)
}

/// Initial allocation: fill agents in order up to their thresholds.
fn initial_state(agents: &[ChainAgent], total_money: usize) -> Result<Vec<usize>> {
    let capacity: usize = agents.iter().map(|a| a.threshold).sum();
    if total_money > capacity {
        return Err(Error::Infeasible {
            m: total_money as f64,
            max: capacity as f64,
        });
    }
    let mut left = total_money;
    Ok(agents
        .iter()
        .map(|a| {
            let x = a.threshold.min(left);
            left -= x;
            x
        })
        .collect())
}

/// Probability that `chosen` serves, given the other willing agents' abilities.
fn serve_probability(betas: &[BigRational], chosen: &BigRational) -> BigRational {
    // dist[x] = P(x of the others are able)
    let mut dist = vec![BigRational::one()];
    for b in betas {
        let mut next = vec![BigRational::zero(); dist.len() + 1];
        let q = BigRational::one() - b;
        for (x, p) in dist.iter().enumerate() {
            next[x] += p * &q;
            next[x + 1] += p * b;
        }
        dist = next;
    }
    let expected: BigRational = dist
        .iter()
        .enumerate()
        .map(|(x, p)| p / BigRational::from_integer(BigInt::from(x + 1)))
        .fold(BigRational::zero(), |acc, v| acc + v);
    chosen * expected
}

fn outgoing(
    agents: &[ChainAgent],
    betas: &[BigRational],
    rhos: &[BigRational],
    rho_total: &BigRational,
    s: &[usize],
) -> Vec<(Vec<usize>, BigRational)> {
    let n = agents.len();
    let mut out = Vec::new();
    for i in 0..n {
        if s[i] == 0 {
            continue;
        }
        let willing: Vec<usize> = (0..n)
            .filter(|&j| j != i && s[j] < agents[j].threshold)
            .collect();
        for &j in &willing {
            let others: Vec<BigRational> = willing
                .iter()
                .filter(|&&k| k != j)
                .map(|&k| betas[k].clone())
                .collect();
            let p = &rhos[i] / rho_total * serve_probability(&others, &betas[j]);
            if p.is_zero() {
                continue;
            }
            let mut t = s.to_vec();
            t[i] -= 1;
            t[j] += 1;
            out.push((t, p));
        }
    }
    out
}

pub(crate) fn build_chain(
    agents: &[ChainAgent],
    total_money: usize,
    limit: usize,
) -> Result<ExactChainResult> {
    let betas = agents
        .iter()
        .map(|a| rational(a.beta))
        .collect::<Result<Vec<_>>>()?;
    let rhos = agents
        .iter()
        .map(|a| rational(a.rho))
        .collect::<Result<Vec<_>>>()?;
    let rho_total = rhos.iter().fold(BigRational::zero(), |acc, r| acc + r);
    if agents.is_empty() || !rho_total.is_positive() {
        return Err(Error::Config(
            "the exact chain needs at least one requesting agent".into(),
        ));
    }

    let start = initial_state(agents, total_money)?;
    let mut index: HashMap<Vec<usize>, usize> = HashMap::from([(start.clone(), 0)]);
    let mut states = vec![start];
    let mut transitions: Vec<Vec<(usize, BigRational)>> = Vec::new();
    let mut queue = VecDeque::from([0usize]);
    while let Some(s) = queue.pop_front() {
        let mut row = Vec::new();
        let mut leave = BigRational::zero();
        for (t, p) in outgoing(agents, &betas, &rhos, &rho_total, &states[s]) {
            let id = match index.get(&t) {
                Some(&id) => id,
                None => {
                    let id = states.len();
                    if id >= limit {
                        return Err(Error::StateSpaceTooLarge { limit });
                    }
                    index.insert(t.clone(), id);
                    states.push(t);
                    queue.push_back(id);
                    id
                }
            };
            leave += &p;
            row.push((id, p));
        }
        let stay = BigRational::one() - leave;
        if !stay.is_zero() {
            row.push((s, stay));
        }
        row.sort_by_key(|(j, _)| *j);
        if transitions.len() <= s {
            transitions.resize(s + 1, Vec::new());
        }
        transitions[s] = row;
    }

    let mut symmetry_residual = BigRational::zero();
    for (s, row) in transitions.iter().enumerate() {
        for (t, p) in row {
            let d = (p - lookup(&transitions[*t], s)).abs();
            if d > symmetry_residual {
                symmetry_residual = d;
            }
        }
    }

    let stationary = if symmetry_residual.is_zero() {
        // a symmetric stochastic matrix is doubly stochastic
        vec![BigRational::new(BigInt::one(), BigInt::from(states.len())); states.len()]
    } else {
        if states.len() > ELIMINATION_LIMIT {
            return Err(Error::StateSpaceTooLarge {
                limit: ELIMINATION_LIMIT,
            });
        }
        solve_stationary(&transitions)
    };

    let mut flow = vec![BigRational::zero(); states.len()];
    for (s, row) in transitions.iter().enumerate() {
        for (t, p) in row {
            flow[*t] += &stationary[s] * p;
        }
    }
    let stationary_residual = flow
        .iter()
        .zip(&stationary)
        .map(|(f, x)| (f - x).abs())
        .fold(BigRational::zero(), |acc, d| if d > acc { d } else { acc });

    let top = states
        .iter()
        .flat_map(|s| s.iter().copied())
        .max()
        .unwrap_or(0);
    let mut agent_marginals = vec![vec![BigRational::zero(); top + 1]; agents.len()];
    for (s, x) in states.iter().zip(&stationary) {
        for (i, &money) in s.iter().enumerate() {
            agent_marginals[i][money] += x;
        }
    }
    let n = BigRational::from_integer(BigInt::from(agents.len()));
    let marginal = (0..=top)
        .map(|level| {
            agent_marginals
                .iter()
                .fold(BigRational::zero(), |acc, m| acc + &m[level])
                / &n
        })
        .collect();

    Ok(ExactChainResult {
        agents: agents.to_vec(),
        total_money,
        states,
        transitions,
        stationary,
        symmetry_residual,
        stationary_residual,
        agent_marginals,
        marginal,
    })
}

/// Solves `x P = x`, `sum x = 1` by exact Gaussian elimination.
fn solve_stationary(transitions: &[Vec<(usize, BigRational)>]) -> Vec<BigRational> {
    let n = transitions.len();
    // Row r of the system is column r of (P^T - I); the last row is replaced by the normalization.
    let mut a = vec![vec![BigRational::zero(); n + 1]; n];
    for (s, row) in transitions.iter().enumerate() {
        for (t, p) in row {
            a[*t][s] += p;
        }
    }
    for (r, row) in a.iter_mut().enumerate() {
        row[r] -= BigRational::one();
    }
    a[n - 1] = vec![BigRational::one(); n + 1];

    for col in 0..n {
        let pivot = (col..n)
            .find(|&r| !a[r][col].is_zero())
            .expect("irreducible chain has a unique solution");
        a.swap(col, pivot);
        let inv = BigRational::one() / &a[col][col];
        for v in a[col].iter_mut() {
            *v *= &inv;
        }
        let pivot_row = a[col].clone();
        for (r, row) in a.iter_mut().enumerate() {
            if r == col || row[col].is_zero() {
                continue;
            }
            let factor = row[col].clone();
            for (v, pv) in row.iter_mut().zip(&pivot_row).skip(col) {
                *v -= &factor * pv;
            }
        }
    }
    a.into_iter().map(|row| row[n].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frac(a: i64, b: i64) -> BigRational {
        BigRational::new(BigInt::from(a), BigInt::from(b))
    }

    fn agents(thresholds: &[usize], beta: f64) -> Vec<ChainAgent> {
        thresholds
            .iter()
            .map(|&k| ChainAgent {
                beta,
                rho: 1.0,
                threshold: k,
            })
            .collect()
    }

    #[test]
    fn three_agents_two_dollars() {
        let r = exact_chain_agents(&agents(&[2, 2, 2], 1.0), 2, STATE_LIMIT).unwrap();
        assert_eq!(r.states.len(), 6);
        assert!(r.is_symmetric());
        assert!(r.is_uniform());
        assert!(r.stationary_residual.is_zero());
        assert_eq!(r.marginal, vec![frac(1, 2), frac(1, 3), frac(1, 6)]);
        for m in &r.agent_marginals {
            assert_eq!(m, &r.marginal);
        }
    }

    #[test]
    fn two_state_chain() {
        let r = exact_chain_agents(&agents(&[1, 1], 0.5), 1, STATE_LIMIT).unwrap();
        assert_eq!(r.states.len(), 2);
        assert!(r.is_symmetric());
        assert_eq!(r.stationary, vec![frac(1, 2), frac(1, 2)]);
        // requester with the dollar is picked half the time, the other is able half the time
        assert_eq!(r.transition(0, 1), frac(1, 4));
    }

    #[test]
    fn rows_sum_to_one() {
        let r = exact_chain_agents(&agents(&[3, 1, 2, 0], 0.5), 3, STATE_LIMIT).unwrap();
        for row in &r.transitions {
            let sum = row.iter().fold(BigRational::zero(), |acc, (_, p)| acc + p);
            assert_eq!(sum, BigRational::one());
        }
        let dense = r.matrix();
        assert_eq!(dense.len(), r.states.len());
    }

    #[test]
    fn heterogeneous_ability_rejected() {
        let mut a = agents(&[2, 2], 1.0);
        a[1].beta = 0.5;
        assert!(matches!(
            exact_chain_agents(&a, 1, STATE_LIMIT),
            Err(Error::NotPayoffHeterogeneous)
        ));
    }

    #[test]
    fn heterogeneous_ability_breaks_symmetry() {
        let mut a = agents(&[2, 2, 2], 1.0);
        a[2].beta = 0.5;
        let r = build_chain(&a, 2, STATE_LIMIT).unwrap();
        assert!(!r.is_symmetric());
        assert!(!r.is_uniform());
        assert!(r.stationary_residual.is_zero());
        let total = r
            .stationary
            .iter()
            .fold(BigRational::zero(), |acc, x| acc + x);
        assert_eq!(total, BigRational::one());
    }

    #[test]
    fn too_many_states() {
        assert!(matches!(
            exact_chain_agents(&agents(&[3, 3, 3, 3], 1.0), 4, 10),
            Err(Error::StateSpaceTooLarge { limit: 10 })
        ));
    }

    #[test]
    fn money_over_capacity_is_infeasible() {
        assert!(matches!(
            exact_chain_agents(&agents(&[1, 1], 1.0), 3, STATE_LIMIT),
            Err(Error::Infeasible { .. })
        ));
    }

    #[test]
    fn serve_probability_matches_closed_form() {
        // common beta b over w willing agents: (1 - (1-b)^w) / w
        let b = frac(1, 2);
        for w in 1..5usize {
            let others = vec![b.clone(); w - 1];
            let got = serve_probability(&others, &b);
            let miss = (0..w).fold(BigRational::one(), |acc, _| acc * frac(1, 2));
            assert_eq!(got, (BigRational::one() - miss) / frac(w as i64, 1));
        }
    }
}
