use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use scripsim::simulator::DEFAULT_SEED;
use scripsim::welfare::CRASH_SEARCH_CAP;
use scripsim::{StrategyProfile, ToleranceConfig};

#[derive(Debug, Parser)]
#[command(
    name = "scripsim",
    version,
    about = "Equilibria, simulation and inference for scrip systems"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Greatest equilibrium at one money supply.
    Equilibrium {
        #[command(flatten)]
        pop: PopArgs,
        /// Average money per money-holding agent.
        #[arg(long)]
        money: f64,
        /// Fraction of requests satisfied for free.
        #[arg(long, default_value_t = 0.0)]
        altruists: f64,
        /// Equilibrium CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Aggregate money distribution CSV.
        #[arg(long)]
        dist: Option<PathBuf>,
        #[command(flatten)]
        tol: TolArgs,
    },
    /// Bracket the money supply at which the system crashes.
    Crash {
        #[command(flatten)]
        pop: PopArgs,
        #[arg(long, default_value_t = 0.0)]
        altruists: f64,
        /// Target bracket width.
        #[arg(long, default_value_t = 0.05)]
        width: f64,
        /// Largest money supply searched.
        #[arg(long, default_value_t = CRASH_SEARCH_CAP)]
        cap: f64,
        /// JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        tol: TolArgs,
    },
    /// Equilibria over a grid of money supplies.
    SweepMoney {
        #[command(flatten)]
        pop: PopArgs,
        #[arg(long, default_value_t = 0.0)]
        altruists: f64,
        /// `lo:hi:step`.
        #[arg(long, value_parser = parse_grid)]
        grid: Grid,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        tol: TolArgs,
    },
    /// Equilibria over a grid of free-service fractions.
    SweepAltruists {
        #[command(flatten)]
        pop: PopArgs,
        #[arg(long)]
        money: f64,
        #[arg(long, value_parser = parse_grid)]
        grid: Grid,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        tol: TolArgs,
    },
    /// Equilibria over a grid of hoarder shares.
    SweepHoarders {
        #[command(flatten)]
        pop: PopArgs,
        #[arg(long)]
        money: f64,
        #[arg(long, value_parser = parse_grid)]
        grid: Grid,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        tol: TolArgs,
    },
    /// Run the round protocol and compare with the max-ent prediction.
    Simulate {
        #[command(flatten)]
        pop: PopArgs,
        #[arg(long)]
        money: f64,
        /// Thresholds per type (`5;5`); defaults to the greatest equilibrium.
        #[arg(long, value_parser = parse_thresholds)]
        thresholds: Option<StrategyProfile>,
        #[arg(long, default_value_t = 10_000_000)]
        rounds: u64,
        /// Defaults to max(10^6, 100 n).
        #[arg(long)]
        burn_in: Option<u64>,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        /// Rounds between distribution samples; defaults to n.
        #[arg(long)]
        record_interval: Option<u64>,
        /// Hoarders never request service.
        #[arg(long)]
        no_hoarder_requests: bool,
        /// Distribution CSV; a JSON sidecar is written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        tol: TolArgs,
    },
    /// Explain an observed money distribution by threshold strategies.
    Infer {
        /// `money,fraction` CSV.
        #[arg(long)]
        dist: PathBuf,
        /// Extra lambda values for alternative explanations (`1.2,2,4`).
        #[arg(long, value_delimiter = ',')]
        lambdas: Vec<f64>,
        /// JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-level ratio CSV.
        #[arg(long)]
        ratios: Option<PathBuf>,
        #[command(flatten)]
        tol: TolArgs,
    },
    /// Exact Markov chain of a tiny system.
    Oracle {
        #[command(flatten)]
        pop: PopArgs,
        /// Average money per agent; total money is rounded to an integer.
        #[arg(long)]
        money: f64,
        #[arg(long, value_parser = parse_thresholds)]
        thresholds: StrategyProfile,
        /// JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every experiment listed in a JSON manifest.
    Suite {
        manifest: PathBuf,
        /// Index file; defaults to `suite-index.json` beside the manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct PopArgs {
    /// Population JSON.
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TolArgs {
    #[arg(long)]
    pub lambda_tol: Option<f64>,
    #[arg(long)]
    pub vi_tol: Option<f64>,
    #[arg(long)]
    pub ratio_tol: Option<f64>,
    #[arg(long)]
    pub k_max: Option<usize>,
    #[arg(long)]
    pub k_max_cap: Option<usize>,
}

impl TolArgs {
    pub fn resolve(&self) -> scripsim::Result<ToleranceConfig> {
        let d = ToleranceConfig::default();
        let k_max_initial = self.k_max.unwrap_or(d.k_max_initial);
        let tol = ToleranceConfig {
            lambda_bisection_tol: self.lambda_tol.unwrap_or(d.lambda_bisection_tol),
            value_iteration_tol: self.vi_tol.unwrap_or(d.value_iteration_tol),
            inference_ratio_tol: self.ratio_tol.unwrap_or(d.inference_ratio_tol),
            k_max_initial,
            k_max_cap: self.k_max_cap.unwrap_or(d.k_max_cap.max(k_max_initial)),
        };
        tol.validate()?;
        Ok(tol)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid(pub Vec<f64>);

/// `lo:hi:step`, inclusive of `hi` up to rounding; values are rounded to 12 significant digits.
pub fn parse_grid(s: &str) -> Result<Grid, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [lo, hi, step] = parts.as_slice() else {
        return Err(format!("expected lo:hi:step, got {s:?}"));
    };
    let num = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}"));
    let (lo, hi, step) = (num(lo)?, num(hi)?, num(step)?);
    if !(lo.is_finite() && hi.is_finite() && step > 0.0 && step.is_finite()) {
        return Err("grid bounds must be finite and the step positive".into());
    }
    if hi < lo {
        return Err(format!("grid upper bound {hi} is below lower bound {lo}"));
    }
    let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    if count > 1_000_000 {
        return Err(format!("grid has {count} points"));
    }
    let round = |x: f64| {
        format!("{x:.11e}")
            .parse::<f64>()
            .expect("formatted float parses")
    };
    Ok(Grid(
        (0..count).map(|i| round(lo + i as f64 * step)).collect(),
    ))
}

/// `20;13` or `20,13`.
pub fn parse_thresholds(s: &str) -> Result<StrategyProfile, String> {
    s.split([';', ','])
        .map(|x| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()
        .map(StrategyProfile)
}
