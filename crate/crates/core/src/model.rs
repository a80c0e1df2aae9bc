//! Domain types shared by every solver: agent types, populations, threshold
//! strategies and the tolerances the numerical routines run at.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used for every "fractions sum to one" check.
pub const FRACTION_TOL: f64 = 1e-9;

/// Payoff parameters of one class of agents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentType {
    /// Cost of performing one job, in utils.
    pub alpha: f64,
    /// Probability of being able to satisfy a given request.
    pub beta: f64,
    /// Utility of having a request satisfied.
    pub gamma: f64,
    /// Discount factor per unit time (one unit is `n` rounds).
    pub delta: f64,
    /// Relative request rate.
    pub rho: f64,
}

impl AgentType {
    pub const fn new(alpha: f64, beta: f64, gamma: f64, delta: f64, rho: f64) -> Self {
        AgentType {
            alpha,
            beta,
            gamma,
            delta,
            rho,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &'static str, value: f64| {
            if ok && value.is_finite() {
                Ok(())
            } else {
                Err(Error::ParameterRange { field, value })
            }
        };
        check(self.alpha >= 0.0, "alpha", self.alpha)?;
        check(self.beta > 0.0 && self.beta <= 1.0, "beta", self.beta)?;
        check(self.gamma > 0.0, "gamma", self.gamma)?;
        check(self.delta > 0.0 && self.delta < 1.0, "delta", self.delta)?;
        check(self.rho > 0.0, "rho", self.rho)
    }

    /// Working can only pay off when a satisfied request is worth more than a job costs.
    pub fn has_surplus(&self) -> bool {
        self.gamma > self.alpha
    }

    /// Discount applied between two consecutive rounds when rounds are `1/n` apart.
    pub fn round_discount(&self, n: usize) -> f64 {
        self.delta.powf(1.0 / n as f64)
    }

    fn same_market_parameters(&self, other: &AgentType) -> bool {
        self.beta == other.beta && self.rho == other.rho
    }
}

/// One standard type together with its population share.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TypeShare {
    pub agent: AgentType,
    pub fraction: f64,
}

/// A validated population of standard agents, hoarders and altruists.
///
/// Construct through [`Population::new`] or [`Population::from_json`]; both run
/// the same validation as [`validate_population`].
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    types: Vec<TypeShare>,
    n: usize,
    hoarder_fraction: f64,
    altruist_fraction: f64,
    hoarder_type: Option<AgentType>,
    payoff_heterogeneous: bool,
}

impl Population {
    pub fn new(types: Vec<TypeShare>, n: usize) -> Result<Self> {
        Self::with_nonstandard(types, n, 0.0, 0.0, None)
    }

    /// Single standard type making up the whole population.
    pub fn homogeneous(agent: AgentType, n: usize) -> Result<Self> {
        Self::new(
            vec![TypeShare {
                agent,
                fraction: 1.0,
            }],
            n,
        )
    }

    pub fn with_nonstandard(
        types: Vec<TypeShare>,
        n: usize,
        hoarder_fraction: f64,
        altruist_fraction: f64,
        hoarder_type: Option<AgentType>,
    ) -> Result<Self> {
        let raw = Population {
            types,
            n,
            hoarder_fraction,
            altruist_fraction,
            hoarder_type,
            payoff_heterogeneous: false,
        };
        validate_population(&raw)
    }

    pub fn types(&self) -> &[TypeShare] {
        &self.types
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn hoarder_fraction(&self) -> f64 {
        self.hoarder_fraction
    }

    pub fn altruist_fraction(&self) -> f64 {
        self.altruist_fraction
    }

    pub fn hoarder_type(&self) -> Option<&AgentType> {
        self.hoarder_type.as_ref()
    }

    /// All standard types (and the hoarder type, if any) share one beta and one rho.
    pub fn is_payoff_heterogeneous(&self) -> bool {
        self.payoff_heterogeneous
    }

    pub fn require_payoff_heterogeneous(&self) -> Result<()> {
        if self.payoff_heterogeneous {
            Ok(())
        } else {
            Err(Error::NotPayoffHeterogeneous)
        }
    }

    /// Mass of agents that hold money: standard agents plus hoarders.
    pub fn moneyed_fraction(&self) -> f64 {
        1.0 - self.altruist_fraction
    }

    pub fn standard_fraction(&self) -> f64 {
        self.types.iter().map(|t| t.fraction).sum()
    }

    /// Types with `gamma <= alpha`; such agents never rationally work.
    pub fn types_without_surplus(&self) -> Vec<usize> {
        self.types
            .iter()
            .enumerate()
            .filter(|(_, t)| !t.agent.has_surplus())
            .map(|(i, _)| i)
            .collect()
    }

    /// Discount factor shared by all standard types, if there is one.
    pub fn common_delta(&self) -> Option<f64> {
        let first = self.types.first()?.agent.delta;
        self.types
            .iter()
            .all(|t| t.agent.delta == first)
            .then_some(first)
    }

    /// Same standard types with the hoarder share replaced by `hoarder_fraction`;
    /// standard shares are rescaled to fill the remaining mass.
    pub fn with_hoarder_fraction(&self, hoarder_fraction: f64) -> Result<Self> {
        let standard = self.standard_fraction();
        let target = 1.0 - hoarder_fraction - self.altruist_fraction;
        let scale = if standard > 0.0 {
            target / standard
        } else {
            0.0
        };
        let types = self
            .types
            .iter()
            .map(|t| TypeShare {
                agent: t.agent,
                fraction: t.fraction * scale,
            })
            .collect();
        Self::with_nonstandard(
            types,
            self.n,
            hoarder_fraction,
            self.altruist_fraction,
            self.hoarder_type,
        )
    }

    pub fn from_config(config: PopulationConfig) -> Result<Self> {
        let types = config
            .types
            .into_iter()
            .map(|t| TypeShare {
                agent: AgentType::new(t.alpha, t.beta, t.gamma, t.delta, t.rho),
                fraction: t.fraction,
            })
            .collect();
        Self::with_nonstandard(
            types,
            config.n,
            config.hoarder_fraction,
            config.altruist_fraction,
            config.hoarder_type,
        )
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_config(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_config(&self) -> PopulationConfig {
        PopulationConfig {
            types: self
                .types
                .iter()
                .map(|t| TypeConfig {
                    alpha: t.agent.alpha,
                    beta: t.agent.beta,
                    gamma: t.agent.gamma,
                    delta: t.agent.delta,
                    rho: t.agent.rho,
                    fraction: t.fraction,
                })
                .collect(),
            n: self.n,
            hoarder_fraction: self.hoarder_fraction,
            altruist_fraction: self.altruist_fraction,
            hoarder_type: self.hoarder_type,
        }
    }
}

/// On-disk form of a population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationConfig {
    pub types: Vec<TypeConfig>,
    pub n: usize,
    #[serde(default)]
    pub hoarder_fraction: f64,
    #[serde(default)]
    pub altruist_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hoarder_type: Option<AgentType>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TypeConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub rho: f64,
    pub fraction: f64,
}

/// Checks every population invariant and returns a copy with the
/// payoff-heterogeneity flag recomputed. Idempotent.
pub fn validate_population(p: &Population) -> Result<Population> {
    if p.n < 2 {
        return Err(Error::ParameterRange {
            field: "n",
            value: p.n as f64,
        });
    }
    for share in &p.types {
        share.agent.validate()?;
        if !(share.fraction >= 0.0 && share.fraction.is_finite()) {
            return Err(Error::ParameterRange {
                field: "fraction",
                value: share.fraction,
            });
        }
    }
    if !(0.0..1.0).contains(&p.hoarder_fraction) {
        return Err(Error::ParameterRange {
            field: "hoarder_fraction",
            value: p.hoarder_fraction,
        });
    }
    if !(0.0..1.0).contains(&p.altruist_fraction) {
        return Err(Error::ParameterRange {
            field: "altruist_fraction",
            value: p.altruist_fraction,
        });
    }
    if let Some(h) = &p.hoarder_type {
        h.validate()?;
    }
    let sum = p.standard_fraction() + p.hoarder_fraction + p.altruist_fraction;
    if (sum - 1.0).abs() > FRACTION_TOL {
        return Err(Error::FractionSum { sum });
    }

    let mut market = p
        .types
        .iter()
        .map(|t| &t.agent)
        .chain(p.hoarder_type.as_ref());
    let payoff_heterogeneous = match market.next() {
        Some(first) => market.all(|t| first.same_market_parameters(t)),
        None => true,
    };
    Ok(Population {
        payoff_heterogeneous,
        ..p.clone()
    })
}

/// A threshold strategy `S_k`: volunteer iff current money is below `k`.
/// `Infinite` (always volunteer) is the hoarder strategy and orders above every finite value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Threshold {
    Finite(usize),
    Infinite,
}

impl Threshold {
    pub fn finite(self) -> Option<usize> {
        match self {
            Threshold::Finite(k) => Some(k),
            Threshold::Infinite => None,
        }
    }

    /// Whether an agent holding `money` dollars volunteers.
    pub fn volunteers_at(self, money: usize) -> bool {
        match self {
            Threshold::Finite(k) => money < k,
            Threshold::Infinite => true,
        }
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threshold::Finite(k) => write!(f, "{k}"),
            Threshold::Infinite => f.write_str("inf"),
        }
    }
}

impl From<usize> for Threshold {
    fn from(k: usize) -> Self {
        Threshold::Finite(k)
    }
}

/// One threshold per standard type, in population order. Hoarders are
/// implicitly at [`Threshold::Infinite`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StrategyProfile(pub Vec<usize>);

impl StrategyProfile {
    pub fn uniform(len: usize, k: usize) -> Self {
        StrategyProfile(vec![k; len])
    }

    pub fn thresholds(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_trivial(&self) -> bool {
        self.0.iter().all(|&k| k == 0)
    }

    /// Componentwise `self <= other`.
    pub fn le(&self, other: &StrategyProfile) -> bool {
        self.0.len() == other.0.len() && self.0.iter().zip(&other.0).all(|(a, b)| a <= b)
    }

    /// Semicolon-joined thresholds, the form used in report CSVs.
    pub fn joined(&self) -> String {
        self.0
            .iter()
            .map(|k| k.to_string())
            .collect::<Vec<_>>()
            .join(";")
    }
}

impl From<Vec<usize>> for StrategyProfile {
    fn from(v: Vec<usize>) -> Self {
        StrategyProfile(v)
    }
}

/// Fraction of the money-holding population playing each threshold.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StrategyMix {
    entries: BTreeMap<Threshold, f64>,
}

impl StrategyMix {
    /// Builds a mix from `(threshold, fraction)` pairs, merging repeated
    /// thresholds and dropping zero entries.
    pub fn new(pairs: impl IntoIterator<Item = (Threshold, f64)>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (k, pi) in pairs {
            if !(pi >= 0.0 && pi.is_finite()) {
                return Err(Error::ParameterRange {
                    field: "pi",
                    value: pi,
                });
            }
            if pi > 0.0 {
                *entries.entry(k).or_insert(0.0) += pi;
            }
        }
        let sum: f64 = entries.values().sum();
        if (sum - 1.0).abs() > FRACTION_TOL {
            return Err(Error::FractionSum { sum });
        }
        Ok(StrategyMix { entries })
    }

    pub fn single(k: Threshold) -> Self {
        StrategyMix {
            entries: BTreeMap::from([(k, 1.0)]),
        }
    }

    pub(crate) fn from_entries_unchecked(entries: BTreeMap<Threshold, f64>) -> Self {
        StrategyMix { entries }
    }

    pub fn get(&self, k: Threshold) -> f64 {
        self.entries.get(&k).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Threshold, f64)> + '_ {
        self.entries.iter().map(|(&k, &pi)| (k, pi))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn hoarder_mass(&self) -> f64 {
        self.get(Threshold::Infinite)
    }

    /// Largest average money the finite thresholds can hold, `sum_k pi_k k`.
    /// Infinite when hoarders are present.
    pub fn max_mean(&self) -> f64 {
        self.iter()
            .map(|(k, pi)| match k {
                Threshold::Finite(k) => pi * k as f64,
                Threshold::Infinite if pi > 0.0 => f64::INFINITY,
                Threshold::Infinite => 0.0,
            })
            .sum()
    }

    pub fn support(&self) -> Vec<Threshold> {
        self.entries.keys().copied().collect()
    }
}

/// Aggregates a per-type profile into threshold fractions over the
/// money-holding (non-altruist) population.
pub fn profile_to_mix(p: &Population, profile: &StrategyProfile) -> Result<StrategyMix> {
    if profile.len() != p.types().len() {
        return Err(Error::Config(format!(
            "profile has {} thresholds for {} types",
            profile.len(),
            p.types().len()
        )));
    }
    let moneyed = p.moneyed_fraction();
    let mut entries = BTreeMap::new();
    let standard = p.types().iter().zip(profile.thresholds());
    for (share, &k) in standard {
        if share.fraction > 0.0 {
            *entries.entry(Threshold::Finite(k)).or_insert(0.0) += share.fraction / moneyed;
        }
    }
    if p.hoarder_fraction() > 0.0 {
        entries.insert(Threshold::Infinite, p.hoarder_fraction() / moneyed);
    }
    Ok(StrategyMix::from_entries_unchecked(entries))
}

/// Numerical settings shared by the solvers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToleranceConfig {
    /// Relative residual at which lambda bisection stops.
    pub lambda_bisection_tol: f64,
    /// Per-round sup-norm Bellman residual.
    pub value_iteration_tol: f64,
    /// Relative tolerance used to decide that two money ratios are equal.
    pub inference_ratio_tol: f64,
    /// Initial value-function truncation, also the finite stand-in for `S_inf`.
    pub k_max_initial: usize,
    /// Hard cap on adaptive truncation doubling.
    pub k_max_cap: usize,
}

impl Default for ToleranceConfig {
    fn default() -> Self {
        ToleranceConfig {
            lambda_bisection_tol: 1e-12,
            value_iteration_tol: 1e-10,
            inference_ratio_tol: 1e-6,
            k_max_initial: 200,
            k_max_cap: 12_800,
        }
    }
}

impl ToleranceConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lambda_bisection_tol", self.lambda_bisection_tol),
            ("value_iteration_tol", self.value_iteration_tol),
            ("inference_ratio_tol", self.inference_ratio_tol),
        ];
        for (field, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::ParameterRange { field, value });
            }
        }
        if self.k_max_initial < 2 || self.k_max_cap < self.k_max_initial {
            return Err(Error::ParameterRange {
                field: "k_max_initial",
                value: self.k_max_initial as f64,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_types() -> Vec<TypeShare> {
        vec![
            TypeShare {
                agent: AgentType::new(0.05, 1.0, 1.0, 0.95, 1.0),
                fraction: 0.3,
            },
            TypeShare {
                agent: AgentType::new(0.15, 1.0, 1.0, 0.95, 1.0),
                fraction: 0.7,
            },
        ]
    }

    #[test]
    fn single_type_is_payoff_heterogeneous() {
        let p = Population::homogeneous(AgentType::new(0.05, 1.0, 1.0, 0.95, 1.0), 1000).unwrap();
        assert!(p.is_payoff_heterogeneous());
    }

    #[test]
    fn two_type_population_is_valid() {
        let p = Population::new(two_types(), 1000).unwrap();
        assert!(p.is_payoff_heterogeneous());
        assert_eq!(p.common_delta(), Some(0.95));
    }

    #[test]
    fn beta_mismatch_is_flagged_not_rejected() {
        let mut types = two_types();
        types[1].agent.beta = 0.5;
        let p = Population::new(types, 1000).unwrap();
        assert!(!p.is_payoff_heterogeneous());
        assert!(matches!(
            p.require_payoff_heterogeneous(),
            Err(Error::NotPayoffHeterogeneous)
        ));
    }

    #[test]
    fn hoarder_type_counts_towards_heterogeneity() {
        let hoarder = AgentType::new(0.0, 0.5, 1.0, 0.95, 1.0);
        let types = vec![TypeShare {
            agent: AgentType::new(0.05, 1.0, 1.0, 0.95, 1.0),
            fraction: 0.9,
        }];
        let p = Population::with_nonstandard(types, 100, 0.1, 0.0, Some(hoarder)).unwrap();
        assert!(!p.is_payoff_heterogeneous());
    }

    #[test]
    fn rejects_bad_fractions_and_ranges() {
        let mut types = two_types();
        types[0].fraction = 0.4;
        assert!(matches!(
            Population::new(types, 1000),
            Err(Error::FractionSum { .. })
        ));

        let mut types = two_types();
        types[0].agent.delta = 1.0;
        assert!(matches!(
            Population::new(types, 1000),
            Err(Error::ParameterRange { field: "delta", .. })
        ));

        assert!(matches!(
            Population::new(two_types(), 1),
            Err(Error::ParameterRange { field: "n", .. })
        ));
    }

    #[test]
    fn validation_is_idempotent() {
        let p = Population::new(two_types(), 1000).unwrap();
        assert_eq!(validate_population(&p).unwrap(), p);
    }

    #[test]
    fn surplus_warning_does_not_reject() {
        let t = AgentType::new(1.0, 1.0, 1.0, 0.9, 1.0);
        let p = Population::homogeneous(t, 10).unwrap();
        assert_eq!(p.types_without_surplus(), vec![0]);
    }

    #[test]
    fn mix_of_two_type_equilibrium() {
        let p = Population::new(two_types(), 1000).unwrap();
        let mix = profile_to_mix(&p, &StrategyProfile(vec![20, 13])).unwrap();
        assert_eq!(mix.len(), 2);
        assert!((mix.get(Threshold::Finite(20)) - 0.3).abs() < 1e-15);
        assert!((mix.get(Threshold::Finite(13)) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn mix_merges_shared_thresholds() {
        let t = AgentType::new(0.05, 1.0, 1.0, 0.95, 1.0);
        let p = Population::new(
            vec![
                TypeShare {
                    agent: t,
                    fraction: 0.4,
                },
                TypeShare {
                    agent: t,
                    fraction: 0.6,
                },
            ],
            50,
        )
        .unwrap();
        let mix = profile_to_mix(&p, &StrategyProfile(vec![5, 5])).unwrap();
        assert_eq!(mix.support(), vec![Threshold::Finite(5)]);
        assert!((mix.get(Threshold::Finite(5)) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mix_has_hoarder_slot() {
        let t = AgentType::new(0.05, 1.0, 1.0, 0.95, 1.0);
        let p = Population::with_nonstandard(
            vec![TypeShare {
                agent: t,
                fraction: 0.8,
            }],
            50,
            0.2,
            0.0,
            None,
        )
        .unwrap();
        let mix = profile_to_mix(&p, &StrategyProfile(vec![3])).unwrap();
        assert!((mix.get(Threshold::Finite(3)) - 0.8).abs() < 1e-15);
        assert!((mix.hoarder_mass() - 0.2).abs() < 1e-15);
        assert_eq!(mix.max_mean(), f64::INFINITY);
    }

    #[test]
    fn mix_renormalizes_over_non_altruists() {
        let t = AgentType::new(0.05, 1.0, 1.0, 0.95, 1.0);
        let p = Population::with_nonstandard(
            vec![TypeShare {
                agent: t,
                fraction: 0.75,
            }],
            50,
            0.0,
            0.25,
            None,
        )
        .unwrap();
        let mix = profile_to_mix(&p, &StrategyProfile(vec![4])).unwrap();
        assert!((mix.get(Threshold::Finite(4)) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn threshold_ordering_puts_infinite_last() {
        assert!(Threshold::Finite(usize::MAX) < Threshold::Infinite);
        assert!(Threshold::Infinite.volunteers_at(1_000_000));
        assert!(!Threshold::Finite(3).volunteers_at(3));
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let text = r#"{"types":[{"alpha":0.05,"beta":1,"gamma":1,"delta":0.95,"rho":1,"fraction":1}],"n":10,"extra":1}"#;
        assert!(matches!(Population::from_json(text), Err(Error::Json(_))));
    }

    #[test]
    fn config_round_trip() {
        let p = Population::new(two_types(), 1000).unwrap();
        let text = serde_json::to_string(&p.to_config()).unwrap();
        assert_eq!(Population::from_json(&text).unwrap(), p);
    }

    #[test]
    fn hoarder_rescaling_keeps_proportions() {
        let p = Population::new(two_types(), 1000).unwrap();
        let h = p.with_hoarder_fraction(0.1).unwrap();
        assert!((h.types()[0].fraction - 0.27).abs() < 1e-12);
        assert!((h.types()[1].fraction - 0.63).abs() < 1e-12);
    }
}
