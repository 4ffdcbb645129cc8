//! The `verify` subcommand: runs the selected oracle checks, prints the
//! fixed-format table, and writes report plus gradient-breakdown CSVs.

use std::path::Path;
use std::process::ExitCode;

use parl::verify::{
    hypergradient_breakdowns, render_table, reports_to_csv, run_check_suite, Check, ALL_CHECKS,
};

pub fn cmd_verify(only: &[String], all: bool, seed: u64, out_dir: &Path) -> ExitCode {
    let selection: Vec<Check> = if all {
        ALL_CHECKS.to_vec()
    } else if only.is_empty() {
        eprintln!("error: pass --all or --only <checks>");
        return ExitCode::from(2);
    } else {
        match only.iter().map(|tok| Check::parse(tok)).collect() {
            Ok(checks) => checks,
            Err(err) => {
                eprintln!("error: {err}");
                return ExitCode::from(2);
            }
        }
    };

    let reports = run_check_suite(&selection, seed);
    print!("{}", render_table(&reports));

    if let Err(err) = std::fs::create_dir_all(out_dir) {
        eprintln!("error: cannot create {}: {err}", out_dir.display());
        return ExitCode::from(3);
    }
    if let Err(err) = std::fs::write(out_dir.join("checks.csv"), reports_to_csv(&reports)) {
        eprintln!("error: {err}");
        return ExitCode::from(3);
    }
    // The hypergradient check comes with term-by-term breakdown rows.
    if selection.contains(&Check::Hypergradient) {
        match hypergradient_breakdowns() {
            Ok(rows) => {
                if let Err(err) =
                    std::fs::write(out_dir.join("breakdown.csv"), parl::verify::breakdowns_to_csv(&rows))
                {
                    eprintln!("error: {err}");
                    return ExitCode::from(3);
                }
            }
            Err(err) => {
                eprintln!("error: {err}");
                return ExitCode::from(3);
            }
        }
    }

    let failed = reports.iter().filter(|r| !r.pass).count();
    if failed > 0 {
        eprintln!("{failed} check(s) FAILED");
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}
