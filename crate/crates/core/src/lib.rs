//! Equilibria, money distributions and simulation for scrip systems with
//! heterogeneous agents.
//!
//! The pipeline: a [`Population`] playing a [`StrategyProfile`] induces a
//! maximum-entropy distribution of money ([`maxent`]); that distribution fixes
//! the rates each agent faces, from which best replies follow ([`bestreply`]).
//! Iterating best replies from the top profile gives the greatest equilibrium,
//! whose welfare and crash behaviour [`welfare`] studies. [`simulator`] runs the
//! round protocol directly and [`inference`] goes from an observed distribution
//! back to strategies.

pub mod bestreply;
pub mod error;
pub mod inference;
pub mod maxent;
pub mod model;
pub mod report;
pub mod simulator;
pub mod welfare;

pub use bestreply::{
    best_reply_profile, best_threshold, environment_rates, find_equilibrium, value_iteration,
    EnvironmentRates, EquilibriumResult, ValueFunction,
};
pub use error::{Error, Result};
pub use maxent::{
    build_distribution, build_from_mix, entropy_of, mean_money_for_threshold, solve_lambda,
    MaxEntSolution,
};
pub use model::{
    profile_to_mix, validate_population, AgentType, Population, StrategyMix, StrategyProfile,
    Threshold, ToleranceConfig, TypeShare,
};
pub use welfare::{
    crash_threshold, sweep_altruists, sweep_hoarders, sweep_money, welfare_rate, CrashSearchResult,
    CrashStatus, SweepRow, WelfareReport,
};
