//! Command-line front end: experiment runner, verification suite, and
//! plot-data emission.
//!
//! Exit codes: 0 success, 1 verification failure, 2 config/input error,
//! 3 runtime failure (partial traces are flushed before exiting).

mod config;
mod plotcmd;
mod runcmd;
mod verifycmd;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Default output directory: `$PARL_OUT_DIR` or `./out`.
fn default_out_dir() -> PathBuf {
    std::env::var_os("PARL_OUT_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("out"))
}

#[derive(Parser)]
#[command(name = "parl", version, about = "Bilevel policy-alignment experiments on tabular MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config: one trace CSV per (method, seed) plus a
    /// summary CSV.
    Run {
        /// Path to a `key = value` experiment config.
        config: PathBuf,
        /// Output directory (default: $PARL_OUT_DIR or ./out).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run oracle checks; exits 1 if any check fails.
    Verify {
        /// Comma-separated check names (trivial, gradient, hessian,
        /// mixed-jacobian, hypergradient, divergence, teacher, trend).
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
        /// Run every standard check.
        #[arg(long)]
        all: bool,
        /// Seed for randomized probes.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate trace CSVs into plot-ready mean/stderr series and a static
    /// SVG.
    Plotdata {
        /// Trace CSVs named `trace_<method>_seed<seed>.csv`.
        traces: Vec<PathBuf>,
        /// Value of the oracle line drawn across the plot.
        #[arg(long)]
        oracle: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the built-in environments.
    ListEnvs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, out } => {
            runcmd::cmd_run(&config, &out.unwrap_or_else(default_out_dir))
        }
        Command::Verify {
            only,
            all,
            seed,
            out,
        } => verifycmd::cmd_verify(&only, all, seed, &out.unwrap_or_else(default_out_dir)),
        Command::Plotdata {
            traces,
            oracle,
            out,
        } => plotcmd::cmd_plotdata(&traces, oracle, &out.unwrap_or_else(default_out_dir)),
        Command::ListEnvs => {
            for env in parl::envs::env_registry() {
                println!("{:<16} {:<72} params: {}", env.name, env.summary, env.params);
            }
            ExitCode::SUCCESS
        }
    }
}

/// Maps library errors to the documented exit codes.
pub(crate) fn exit_code_for(err: &parl::Error) -> ExitCode {
    match err {
        parl::Error::Parse { .. }
        | parl::Error::InvalidArgument(_)
        | parl::Error::SchemaMismatch { .. }
        | parl::Error::InvalidDistribution { .. } => ExitCode::from(2),
        _ => ExitCode::from(3),
    }
}
