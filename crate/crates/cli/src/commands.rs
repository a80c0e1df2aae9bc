use std::fmt::Write as _;
use std::fs::File;
use std::path::Path;

use anyhow::{bail, Result};
use serde::Serialize;

use scripsim::inference::{enumerate_explanations, minimal_explanation, ObservedDistribution};
use scripsim::report::{
    distribution_csv, equilibrium_csv, ratio_csv, sweep_csv, to_json, write_atomic, CrashReport,
    ExplanationReport, SimulationSidecar,
};
use scripsim::simulator::{compare_to_prediction, exact_chain, run_simulation, SimConfig};
use scripsim::welfare::{crash_threshold, sweep_altruists, sweep_hoarders, sweep_money, SweepRow};
use scripsim::{build_distribution, find_equilibrium, EquilibriumResult, Population};

use crate::args::{Command, PopArgs};
use crate::suite;

fn load(pop: &PopArgs) -> Result<Population> {
    Ok(Population::load(&pop.config)?)
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.6}"))
}

/// Writes `contents` to `out`, or returns it for printing when there is no path.
fn emit(out: Option<&Path>, contents: &str, what: &str) -> Result<String> {
    match out {
        Some(path) => {
            write_atomic(path, contents.as_bytes())?;
            Ok(format!("wrote {what} to {}\n", path.display()))
        }
        None => Ok(contents.to_string()),
    }
}

fn equilibrium_summary(e: &EquilibriumResult) -> String {
    format!(
        "thresholds {}\ncrashed {}\nlambda {}\nM0 {}\ntau {}\nwelfare_rate {:.6}\n",
        e.profile.joined(),
        e.crashed,
        opt(e.lambda()),
        opt(e.m0()),
        opt(e.tau()),
        e.welfare.per_round
    )
}

fn sweep_output(column: &str, rows: &[SweepRow], out: Option<&Path>) -> Result<String> {
    let csv = sweep_csv(column, rows)?;
    match out {
        Some(path) => {
            write_atomic(path, csv.as_bytes())?;
            let crashed = rows.iter().filter(|r| r.crashed()).count();
            Ok(format!(
                "wrote {} rows ({crashed} crashed) to {}\n",
                rows.len(),
                path.display()
            ))
        }
        None => Ok(csv),
    }
}

#[derive(Serialize)]
struct AlternativeReport {
    lambda: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    explanation: Option<ExplanationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'static str>,
}

#[derive(Serialize)]
struct InferReport {
    #[serde(flatten)]
    minimal: ExplanationReport,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    alternatives: Vec<AlternativeReport>,
}

#[derive(Serialize)]
struct OracleReport {
    n: usize,
    total_money: usize,
    states: usize,
    symmetry_residual: String,
    stationary_residual: String,
    symmetric: bool,
    uniform_stationary: bool,
    /// Agent-averaged stationary money distribution as exact fractions.
    marginal: Vec<String>,
    marginal_f64: Vec<f64>,
}

pub fn run(cmd: &Command) -> Result<String> {
    match cmd {
        Command::Equilibrium {
            pop,
            money,
            altruists,
            out,
            dist,
            tol,
        } => {
            let p = load(pop)?;
            let e = find_equilibrium(&p, *money, *altruists, &tol.resolve()?)?;
            let mut summary = equilibrium_summary(&e);
            if let Some(path) = out {
                summary += &emit(
                    Some(path),
                    &equilibrium_csv(std::slice::from_ref(&e))?,
                    "equilibrium",
                )?;
            }
            if let Some(path) = dist {
                let fractions = e
                    .solution
                    .as_ref()
                    .map(|s| s.aggregate.clone())
                    .unwrap_or_default();
                summary += &emit(Some(path), &distribution_csv(&fractions)?, "distribution")?;
            }
            Ok(summary)
        }
        Command::Crash {
            pop,
            altruists,
            width,
            cap,
            out,
            tol,
        } => {
            let p = load(pop)?;
            let c = crash_threshold(&p, *altruists, *width, *cap, &tol.resolve()?)?;
            let mut summary = format!("status {:?}\nm_crash {:.6}\n", c.status, c.m_crash);
            if let Some((lo, hi)) = c.bracket {
                let _ = writeln!(summary, "bracket {lo:.6} {hi:.6}");
            }
            if let Some(path) = out {
                summary += &emit(
                    Some(path),
                    &to_json(&CrashReport::from(&c))?,
                    "crash report",
                )?;
            }
            Ok(summary)
        }
        Command::SweepMoney {
            pop,
            altruists,
            grid,
            out,
            tol,
        } => {
            let p = load(pop)?;
            let rows = sweep_money(&p, *altruists, &grid.0, &tol.resolve()?)?;
            sweep_output("m", &rows, out.as_deref())
        }
        Command::SweepAltruists {
            pop,
            money,
            grid,
            out,
            tol,
        } => {
            let p = load(pop)?;
            let rows = sweep_altruists(&p, *money, &grid.0, &tol.resolve()?)?;
            sweep_output("a", &rows, out.as_deref())
        }
        Command::SweepHoarders {
            pop,
            money,
            grid,
            out,
            tol,
        } => {
            let p = load(pop)?;
            let rows = sweep_hoarders(&p, *money, &grid.0, &tol.resolve()?)?;
            sweep_output("fH", &rows, out.as_deref())
        }
        Command::Simulate {
            pop,
            money,
            thresholds,
            rounds,
            burn_in,
            seed,
            record_interval,
            no_hoarder_requests,
            out,
            tol,
        } => {
            let p = load(pop)?;
            let tol = tol.resolve()?;
            let profile = match thresholds {
                Some(t) => t.clone(),
                None => find_equilibrium(&p, *money, 0.0, &tol)?.profile,
            };
            let mut cfg = SimConfig::new(p.clone(), profile.clone(), *money);
            cfg.rounds = *rounds;
            cfg.seed = *seed;
            cfg.hoarders_request = !no_hoarder_requests;
            if let Some(b) = burn_in {
                cfg.burn_in = *b;
            }
            if let Some(r) = record_interval {
                cfg.record_interval = *r;
            }
            let res = run_simulation(cfg.clone())?;
            let l2 = build_distribution(&p, &profile, *money, tol.lambda_bisection_tol)
                .ok()
                .map(|sol| compare_to_prediction(&res, &sol));
            let mut summary = format!(
                "thresholds {}\npaid_trades {}\nfree_trades {}\na_hat {:.6}\nwelfare_rate {:.6}\nl2_to_prediction {}\n",
                profile.joined(),
                res.paid_trades,
                res.free_trades,
                res.a_hat,
                res.welfare_rate,
                opt(l2)
            );
            if let Some(path) = out {
                summary += &emit(
                    Some(path),
                    &distribution_csv(&res.distribution)?,
                    "distribution",
                )?;
                let sidecar = path.with_extension("json");
                summary += &emit(
                    Some(&sidecar),
                    &to_json(&SimulationSidecar::new(&cfg, &res, l2))?,
                    "metadata",
                )?;
            }
            Ok(summary)
        }
        Command::Infer {
            dist,
            lambdas,
            out,
            ratios,
            tol,
        } => {
            let tol = tol.resolve()?;
            let obs = ObservedDistribution::from_csv(File::open(dist)?)?;
            let minimal = minimal_explanation(&obs, tol.inference_ratio_tol, &tol)?;
            let alternatives = enumerate_explanations(&obs, lambdas, tol.inference_ratio_tol, &tol)
                .into_iter()
                .map(|(lambda, r)| match r {
                    Ok(e) => AlternativeReport {
                        lambda,
                        explanation: Some((&e).into()),
                        error: None,
                    },
                    Err(err) => AlternativeReport {
                        lambda,
                        explanation: None,
                        error: Some(err.name()),
                    },
                })
                .collect();
            let report = InferReport {
                minimal: (&minimal).into(),
                alternatives,
            };
            let json = to_json(&report)?;
            let mut summary = if out.is_some() {
                let support: Vec<String> =
                    minimal.support().iter().map(|k| k.to_string()).collect();
                format!(
                    "lambda {:.6}\nsupport {}\nresidual {:e}\n",
                    minimal.lambda,
                    support.join(";"),
                    minimal.residual
                )
            } else {
                String::new()
            };
            summary += &emit(out.as_deref(), &json, "inference report")?;
            if let Some(path) = ratios {
                summary += &emit(Some(path), &ratio_csv(&obs)?, "ratios")?;
            }
            Ok(summary)
        }
        Command::Oracle {
            pop,
            money,
            thresholds,
            out,
        } => {
            let p = load(pop)?;
            if !(*money >= 0.0) {
                bail!(scripsim::Error::ParameterRange {
                    field: "money",
                    value: *money
                });
            }
            let total = (money * p.n() as f64).round() as usize;
            let chain = exact_chain(&p, thresholds, total)?;
            let report = OracleReport {
                n: p.n(),
                total_money: total,
                states: chain.states.len(),
                symmetry_residual: chain.symmetry_residual.to_string(),
                stationary_residual: chain.stationary_residual.to_string(),
                symmetric: chain.is_symmetric(),
                uniform_stationary: chain.is_uniform(),
                marginal: chain.marginal.iter().map(|x| x.to_string()).collect(),
                marginal_f64: chain.marginal_f64(),
            };
            let summary = format!(
                "states {}\nsymmetry_residual {}\nuniform_stationary {}\n",
                report.states, report.symmetry_residual, report.uniform_stationary
            );
            let json = to_json(&report)?;
            Ok(match out {
                Some(path) => summary + &emit(Some(path), &json, "oracle report")?,
                None => summary + &json,
            })
        }
        Command::Suite { manifest, out } => suite::run_suite(manifest, out.as_deref()),
    }
}
