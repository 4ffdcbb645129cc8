//! The `run` subcommand: executes every (method, seed) cell of an
//! experiment, one thread per cell, and writes trace plus summary CSVs.

use std::path::Path;
use std::process::ExitCode;

use parl::driver::{run_aparl, run_naive_rlhf, stationarity_trace, trace_to_csv, RunTrace};
use parl::envs::oracle_return;
use parl::error::Error;
use parl::policy::params_to_line;
use parl::reward::pairs_to_text;

use crate::config::{parse_experiment, ExperimentConfig, Method};

pub fn cmd_run(config_path: &Path, out_dir: &Path) -> ExitCode {
    let text = match std::fs::read_to_string(config_path) {
        Ok(text) => text,
        Err(err) => {
            eprintln!("error: cannot read {}: {err}", config_path.display());
            return ExitCode::from(2);
        }
    };
    let experiment = match parse_experiment(&text) {
        Ok(experiment) => experiment,
        Err(err) => {
            eprintln!("error: {err}");
            return ExitCode::from(2);
        }
    };
    if let Err(err) = std::fs::create_dir_all(out_dir) {
        eprintln!("error: cannot create {}: {err}", out_dir.display());
        return ExitCode::from(3);
    }
    match execute(&experiment, out_dir) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            crate::exit_code_for(&err)
        }
    }
}

fn execute(experiment: &ExperimentConfig, out_dir: &Path) -> Result<(), Error> {
    let oracle = oracle_return(&experiment.bundle)?;

    // Cells are independent; run them concurrently and write each trace
    // from its own thread. The summary is assembled afterwards in a fixed
    // (method, seed) order.
    let mut cells: Vec<(Method, u64, Result<RunTrace, Error>)> = Vec::new();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for &method in &experiment.methods {
            for &seed in &experiment.seeds {
                let bundle = &experiment.bundle;
                let cfg = experiment.run_config(seed);
                handles.push((
                    method,
                    seed,
                    scope.spawn(move || match method {
                        Method::Aparl => run_aparl(bundle, &cfg),
                        Method::Naive => run_naive_rlhf(bundle, &cfg),
                    }),
                ));
            }
        }
        for (method, seed, handle) in handles {
            let outcome = handle.join().expect("run thread panicked");
            cells.push((method, seed, outcome));
        }
    });

    let mut summary = String::from("method,seed,final_align_return,final_stationarity,oracle_return\n");
    let mut failure: Option<Error> = None;
    for (method, seed, outcome) in cells {
        let trace_path = out_dir.join(format!("trace_{}_seed{}.csv", method.name(), seed));
        match outcome {
            Ok(trace) => {
                std::fs::write(&trace_path, trace_to_csv(&trace, experiment.timings))?;
                // Final parameter checkpoints and, for sampled runs, the
                // accumulated preference dataset.
                let last = trace.final_record();
                std::fs::write(
                    out_dir.join(format!("nu_{}_seed{}.txt", method.name(), seed)),
                    params_to_line(&last.nu) + "\n",
                )?;
                std::fs::write(
                    out_dir.join(format!("theta_{}_seed{}.txt", method.name(), seed)),
                    params_to_line(&last.theta) + "\n",
                )?;
                if !trace.dataset.is_empty() {
                    std::fs::write(
                        out_dir.join(format!("pairs_{}_seed{}.txt", method.name(), seed)),
                        pairs_to_text(&trace.dataset),
                    )?;
                }
                let stationarity = stationarity_trace(&trace)?;
                summary.push_str(&format!(
                    "{},{},{},{},{}\n",
                    method.name(),
                    seed,
                    trace.final_record().align_return,
                    stationarity.running_means.last().unwrap(),
                    oracle
                ));
            }
            Err(Error::AbortedRun {
                at_iteration,
                partial,
            }) => {
                // Flush what we have before reporting the failure.
                std::fs::write(&trace_path, trace_to_csv(&partial, experiment.timings))?;
                eprintln!(
                    "run {} seed {seed} aborted at iteration {at_iteration}; partial trace written to {}",
                    method.name(),
                    trace_path.display()
                );
                failure.get_or_insert(Error::AbortedRun {
                    at_iteration,
                    partial,
                });
            }
            Err(other) => {
                failure.get_or_insert(other);
            }
        }
    }
    std::fs::write(out_dir.join("summary.csv"), summary)?;
    println!(
        "experiment {}: {} method(s) x {} seed(s) written to {}",
        experiment.name,
        experiment.methods.len(),
        experiment.seeds.len(),
        out_dir.display()
    );
    match failure {
        None => Ok(()),
        Some(err) => Err(err),
    }
}
