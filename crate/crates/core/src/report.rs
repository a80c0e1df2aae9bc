//! CSV and JSON output formats.
//!
//! Every CSV starts with a header row and prints numbers rounded to 12
//! significant digits, so identical inputs give byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::bestreply::EquilibriumResult;
use crate::error::{Error, Result};
use crate::inference::{Explanation, ObservedDistribution};
use crate::simulator::SimResult;
use crate::welfare::{CrashSearchResult, SweepRow};

pub const DISTRIBUTION_HEADER: [&str; 2] = ["money", "fraction"];
pub const TYPE_DISTRIBUTION_HEADER: [&str; 3] = ["type_index", "money", "fraction"];
pub const EQUILIBRIUM_HEADER: [&str; 8] = [
    "m",
    "a",
    "crashed",
    "lambda",
    "M0",
    "tau",
    "welfare_rate",
    "thresholds",
];
pub const SWEEP_TAIL: [&str; 6] = [
    "crashed",
    "lambda",
    "M0",
    "tau",
    "welfare_rate",
    "thresholds",
];
pub const RATIO_HEADER: [&str; 3] = ["money", "fraction", "ratio"];

/// `x` rounded to 12 significant digits, in plain notation unless very large or small.
pub fn fmt_num(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let rounded: f64 = format!("{x:.11e}").parse().expect("formatted float parses");
    let mag = rounded.abs();
    if mag != 0.0 && !(1e-5..1e15).contains(&mag) {
        format!("{rounded:e}")
    } else {
        format!("{rounded}")
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_num).unwrap_or_default()
}

fn csv_string<I, R>(header: &[&str], rows: I) -> Result<String>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.into_iter())?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: impl AsRef<Path>, contents: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// `money,fraction`.
pub fn distribution_csv(fractions: &[f64]) -> Result<String> {
    csv_string(
        &DISTRIBUTION_HEADER,
        fractions
            .iter()
            .enumerate()
            .map(|(i, x)| [i.to_string(), fmt_num(*x)]),
    )
}

/// `type_index,money,fraction`, one block per type.
pub fn type_distribution_csv(rows: &[Vec<f64>]) -> Result<String> {
    csv_string(
        &TYPE_DISTRIBUTION_HEADER,
        rows.iter().enumerate().flat_map(|(t, row)| {
            row.iter()
                .enumerate()
                .map(move |(i, x)| [t.to_string(), i.to_string(), fmt_num(*x)])
        }),
    )
}

fn equilibrium_fields(e: &EquilibriumResult) -> [String; 6] {
    [
        e.crashed.to_string(),
        fmt_opt(e.lambda()),
        fmt_opt(e.m0()),
        fmt_opt(e.tau()),
        fmt_num(e.welfare.per_round),
        e.profile.joined(),
    ]
}

/// `m,a,crashed,lambda,M0,tau,welfare_rate,thresholds`; distribution columns are empty for a crash.
pub fn equilibrium_csv(results: &[EquilibriumResult]) -> Result<String> {
    csv_string(
        &EQUILIBRIUM_HEADER,
        results.iter().map(|e| {
            let mut row = vec![fmt_num(e.m), fmt_num(e.a)];
            row.extend(equilibrium_fields(e));
            row
        }),
    )
}

/// Sweep rows headed by `column` (`m`, `a` or `fH`). A row whose solve failed
/// has `error` in the crashed column and the error name in place of thresholds.
pub fn sweep_csv(column: &str, rows: &[SweepRow]) -> Result<String> {
    let mut header = vec![column];
    header.extend(SWEEP_TAIL);
    csv_string(
        &header,
        rows.iter().map(|r| {
            let mut row = vec![fmt_num(r.x)];
            match &r.outcome {
                Ok(e) => row.extend(equilibrium_fields(e)),
                Err(err) => row.extend([
                    "error".into(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    err.name().into(),
                ]),
            }
            row
        }),
    )
}

/// `money,fraction,ratio` where ratio is `M_i / M_{i-1}` (empty at 0).
pub fn ratio_csv(obs: &ObservedDistribution) -> Result<String> {
    let ratios = obs.ratios();
    csv_string(
        &RATIO_HEADER,
        obs.fractions().iter().enumerate().map(|(i, x)| {
            let r = if i == 0 {
                String::new()
            } else {
                fmt_num(ratios[i - 1])
            };
            [i.to_string(), fmt_num(*x), r]
        }),
    )
}

#[derive(Debug, Serialize)]
pub struct ExplanationReport {
    pub lambda: f64,
    pub rebuilt_lambda: f64,
    pub mean: f64,
    pub support: Vec<usize>,
    pub pi: BTreeMap<usize, f64>,
    pub residual: f64,
}

impl From<&Explanation> for ExplanationReport {
    fn from(e: &Explanation) -> Self {
        ExplanationReport {
            lambda: e.lambda,
            rebuilt_lambda: e.rebuilt.lambda,
            mean: e.rebuilt.m,
            support: e.support(),
            pi: e
                .pi
                .iter()
                .filter_map(|(k, x)| k.finite().map(|k| (k, x)))
                .collect(),
            residual: e.residual,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct SimulationSidecar {
    pub seed: u64,
    pub rounds: u64,
    pub burn_in: u64,
    pub record_interval: u64,
    pub n: usize,
    pub m: f64,
    pub total_money: u64,
    pub samples: u64,
    pub a_hat: f64,
    pub welfare_rate: f64,
    pub requests: u64,
    pub paid_trades: u64,
    pub free_trades: u64,
    pub unserved: u64,
    pub type_utility_rate: Vec<f64>,
    pub type_discounted_utility: Vec<f64>,
    /// L2 distance to the max-ent prediction, when one exists.
    pub l2_to_prediction: Option<f64>,
}

impl SimulationSidecar {
    pub fn new(
        cfg: &crate::simulator::SimConfig,
        res: &SimResult,
        l2_to_prediction: Option<f64>,
    ) -> Self {
        SimulationSidecar {
            seed: cfg.seed,
            rounds: res.rounds,
            burn_in: cfg.burn_in,
            record_interval: cfg.record_interval,
            n: cfg.population.n(),
            m: cfg.m,
            total_money: res.total_money,
            samples: res.samples,
            a_hat: res.a_hat,
            welfare_rate: res.welfare_rate,
            requests: res.requests,
            paid_trades: res.paid_trades,
            free_trades: res.free_trades,
            unserved: res.unserved,
            type_utility_rate: res.type_utility_rate.clone(),
            type_discounted_utility: res.type_discounted_utility.clone(),
            l2_to_prediction,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct CrashReport {
    pub status: String,
    pub m_crash: f64,
    pub bracket_lo: Option<f64>,
    pub bracket_hi: Option<f64>,
    pub evaluations: usize,
}

impl From<&CrashSearchResult> for CrashReport {
    fn from(c: &CrashSearchResult) -> Self {
        CrashReport {
            status: format!("{:?}", c.status),
            m_crash: c.m_crash,
            bracket_lo: c.bracket.map(|b| b.0),
            bracket_hi: c.bracket.map(|b| b.1),
            evaluations: c.evaluations,
        }
    }
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}
