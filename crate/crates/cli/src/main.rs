//! `fedgen`: closed-form error curves and Monte-Carlo simulation of
//! federated averaging on Gaussian linear models.
//!
//! Exit codes: 0 success, 1 verification failure, 2 invalid input (with a
//! machine-readable JSON error on stderr).

mod commands;
mod output;
mod overlay;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fedgen_core::Error;

#[derive(Parser)]
#[command(name = "fedgen", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration options shared by the experiment commands. Precedence:
/// preset defaults, then the config file, then these flags.
#[derive(Args, Clone, Default)]
pub struct CommonOpts {
    /// JSON experiment configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Named experiment shape: fig2, fig3 or fig4.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Number of clients.
    #[arg(long)]
    pub m: Option<usize>,
    /// Model dimension.
    #[arg(long)]
    pub p: Option<usize>,
    /// True-feature count.
    #[arg(long)]
    pub s: Option<usize>,
    /// Communication rounds.
    #[arg(long)]
    pub t: Option<usize>,
    /// Local update regime: k1, kfinite or kinf.
    #[arg(long)]
    pub regime: Option<String>,
    /// Local steps per round (kfinite regime).
    #[arg(long)]
    pub k: Option<usize>,
    /// Samples per client per round.
    #[arg(long)]
    pub n: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Observation noise standard deviation.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Heterogeneity offset norm.
    #[arg(long)]
    pub het_norm: Option<f64>,
    /// Heterogeneity kind: zero, stationary_symmetric or non_stationary.
    #[arg(long)]
    pub het_kind: Option<String>,
    /// Initial distance from the target solution.
    #[arg(long)]
    pub delta0: Option<f64>,
    /// Base RNG seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Monte-Carlo trial count.
    #[arg(long)]
    pub trials: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SweepAxis {
    T,
    K,
    P,
    M,
}

#[derive(Subcommand)]
enum Command {
    /// Write the exact expected model-error curve as CSV.
    Theory {
        #[command(flatten)]
        opts: CommonOpts,
        /// Output directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Also emit the per-round contraction and forcing coefficients.
        #[arg(long)]
        verbose_coefficients: bool,
    },
    /// Run Monte-Carlo trials of the federated process and write the
    /// per-round summary as CSV.
    Simulate {
        #[command(flatten)]
        opts: CommonOpts,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Join the exact curve with a Monte-Carlo run and report z-scores.
    Compare {
        #[command(flatten)]
        opts: CommonOpts,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Negative control: simulate with this noise level while the
        /// curve uses the configured one.
        #[arg(long, hide = true)]
        override_sim_sigma: Option<f64>,
    },
    /// Evaluate the exact curve along one axis (t, k, p or m).
    Sweep {
        #[command(flatten)]
        opts: CommonOpts,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, value_enum)]
        axis: SweepAxis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', conflicts_with = "range")]
        values: Option<Vec<usize>>,
        /// Inclusive range START:END[:STEP].
        #[arg(long)]
        range: Option<String>,
        /// Rounds to report for the p axis (default: the final round).
        #[arg(long, value_delimiter = ',')]
        at_rounds: Option<Vec<usize>>,
        /// Upper bound of the local-step grid for the m axis.
        #[arg(long)]
        k_max: Option<usize>,
    },
    /// Search the local-step grid for the error minimizer.
    OptK {
        #[command(flatten)]
        opts: CommonOpts,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Hold the per-step batch size fixed at this value (otherwise the
        /// configured per-round total n is held fixed).
        #[arg(long)]
        fixed_batch: Option<usize>,
        #[arg(long)]
        k_max: Option<usize>,
        /// Evaluate the long-horizon fixed point instead of round T.
        #[arg(long)]
        limit: bool,
    },
    /// Run the self-verification battery (closed-form identities and
    /// Monte-Carlo expectation oracles).
    Verify {
        /// Which checks to run: identities, lemmas or all.
        #[arg(long, default_value = "all")]
        suite: String,
        /// Monte-Carlo trials per expectation oracle.
        #[arg(long, default_value_t = 4000)]
        trials: usize,
        /// Fault injection for negative-control testing.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn parse_range(range: &str) -> Result<Vec<usize>, Error> {
    let parts: Vec<&str> = range.split(':').collect();
    let bad = || Error::InvalidConfig(format!("bad range {range:?}, expected START:END[:STEP]"));
    if parts.len() < 2 || parts.len() > 3 {
        return Err(bad());
    }
    let start: usize = parts[0].parse().map_err(|_| bad())?;
    let end: usize = parts[1].parse().map_err(|_| bad())?;
    let step: usize = if parts.len() == 3 { parts[2].parse().map_err(|_| bad())? } else { 1 };
    if step == 0 || end < start {
        return Err(bad());
    }
    Ok((start..=end).step_by(step).collect())
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::RankDeficient(_) => "RankDeficient",
        Error::BatchTooSmall { .. } => "BatchTooSmall",
        Error::BoundaryDimension(_) => "BoundaryDimension",
        Error::RegimeGap { .. } => "RegimeGap",
        Error::ImpossibleSchedule(_) => "ImpossibleSchedule",
        Error::DimensionViolation(_) => "DimensionViolation",
        Error::InvalidConfig(_) => "InvalidConfig",
    }
}

fn run() -> Result<ExitCode, Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::Theory { opts, out, verbose_coefficients } => {
            commands::cmd_theory(&opts, &out, verbose_coefficients)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate { opts, out } => {
            commands::cmd_simulate(&opts, &out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Compare { opts, out, override_sim_sigma } => {
            commands::cmd_compare(&opts, &out, override_sim_sigma)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { opts, out, axis, values, range, at_rounds, k_max } => {
            let values = match (values, range) {
                (Some(v), _) => v,
                (None, Some(r)) => parse_range(&r)?,
                (None, None) => {
                    return Err(Error::InvalidConfig(
                        "sweep needs --values or --range".into(),
                    ))
                }
            };
            commands::cmd_sweep(&opts, &out, axis, values, at_rounds, k_max)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::OptK { opts, out, fixed_batch, k_max, limit } => {
            commands::cmd_opt_k(&opts, &out, fixed_batch, k_max, limit)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { suite, trials, inject_fault, seed, out } => {
            let all_pass =
                commands::cmd_verify(&out, &suite, trials, inject_fault.as_deref(), seed)?;
            if all_pass {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(1))
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    match run() {
        Ok(code) => code,
        Err(e) => {
            let payload = serde_json::json!({
                "error": error_kind(&e),
                "detail": e.to_string(),
            });
            eprintln!("{payload}");
            ExitCode::from(2)
        }
    }
}
