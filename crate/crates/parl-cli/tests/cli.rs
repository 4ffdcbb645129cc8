//! End-to-end command tests: exit codes, file outputs, determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn parl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_parl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("parl-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_cfg(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

const TINY_RLHF: &str = "\
[experiment]
name = tiny
seeds = 3
methods = aparl naive

[env]
kind = rlhf-2state

[run]
outer_iters = 4
step_size_upper = 0.1
k = 4
damping = 1.0

[objective]
kind = rlhf
beta = 2
pairs_per_iter = 5
data = sampled
";

#[test]
fn run_with_zero_iterations_writes_initial_metrics() {
    let dir = tmp_dir("zeroiters");
    let cfg = write_cfg(
        &dir,
        "zero.cfg",
        &TINY_RLHF.replace("outer_iters = 4", "outer_iters = 0"),
    );
    let out = parl(&["run", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = std::fs::read_to_string(dir.join("summary.csv")).unwrap();
    assert!(summary.lines().count() >= 3, "header + 2 method rows");
    let trace = std::fs::read_to_string(dir.join("trace_aparl_seed3.csv")).unwrap();
    assert_eq!(trace.lines().count(), 2, "header + single initial record");
}

#[test]
fn malformed_key_exits_2_and_names_it() {
    let dir = tmp_dir("badkey");
    let cfg = write_cfg(
        &dir,
        "bad.cfg",
        &format!("{TINY_RLHF}\n[run]\nbogus_knob = 1\n"),
    );
    let out = parl(&["run", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bogus_knob"), "stderr names the key: {stderr}");
}

#[test]
fn duplicate_section_key_is_rejected() {
    let dir = tmp_dir("dupkey");
    let cfg = write_cfg(&dir, "dup.cfg", "[env]\nkind = rlhf-2state\nkind = chain\n");
    let out = parl(&["run", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runs_are_byte_deterministic() {
    let dir_a = tmp_dir("det-a");
    let dir_b = tmp_dir("det-b");
    let cfg = write_cfg(&dir_a, "tiny.cfg", TINY_RLHF);
    for dir in [&dir_a, &dir_b] {
        let out = parl(&["run", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
        assert!(out.status.success());
    }
    for name in [
        "trace_aparl_seed3.csv",
        "trace_naive_seed3.csv",
        "summary.csv",
    ] {
        let a = std::fs::read(dir_a.join(name)).unwrap();
        let b = std::fs::read(dir_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}

#[test]
fn verify_trivial_is_fast_and_green() {
    let dir = tmp_dir("verify");
    let started = std::time::Instant::now();
    let out = parl(&[
        "verify",
        "--only",
        "trivial",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(started.elapsed().as_secs() < 5, "trivial checks under 5 s");
    assert!(dir.join("checks.csv").exists());
}

#[test]
fn verify_is_deterministic_per_seed() {
    let dir_a = tmp_dir("vdet-a");
    let dir_b = tmp_dir("vdet-b");
    for dir in [&dir_a, &dir_b] {
        let out = parl(&[
            "verify",
            "--only",
            "trivial,teacher,divergence",
            "--seed",
            "7",
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert!(out.status.success());
    }
    let a = std::fs::read(dir_a.join("checks.csv")).unwrap();
    let b = std::fs::read(dir_b.join("checks.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn verify_negative_control_exits_1() {
    let dir = tmp_dir("negctl");
    let out = parl(&[
        "verify",
        "--only",
        "negative-control",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    // Reports are still written on failure.
    let csv = std::fs::read_to_string(dir.join("checks.csv")).unwrap();
    assert!(csv.contains("negative-control"));
    assert!(csv.contains("false"));
}

#[test]
fn verify_unknown_check_exits_2() {
    let dir = tmp_dir("unkchk");
    let out = parl(&["verify", "--only", "bogus", "--out", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn plotdata_single_seed_band_is_zero() {
    let dir = tmp_dir("plot1");
    let cfg = write_cfg(&dir, "tiny.cfg", TINY_RLHF);
    let out = parl(&["run", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert!(out.status.success());
    let trace = dir.join("trace_aparl_seed3.csv");
    let out = parl(&[
        "plotdata",
        "--oracle",
        "1.71",
        "--out",
        dir.to_str().unwrap(),
        trace.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let plot = std::fs::read_to_string(dir.join("plot_align.csv")).unwrap();
    let mut lines = plot.lines();
    assert_eq!(
        lines.next().unwrap(),
        "iteration,aparl_mean,aparl_stderr,oracle"
    );
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[2], "0", "single seed gives a zero-width band");
        assert_eq!(fields[3], "1.71", "oracle line is constant");
    }
    assert!(std::fs::read_to_string(dir.join("plot_align.svg"))
        .unwrap()
        .starts_with("<svg"));
}

#[test]
fn plotdata_round_trips_run_output() {
    let dir = tmp_dir("plotrt");
    let cfg = write_cfg(&dir, "tiny.cfg", TINY_RLHF);
    assert!(parl(&["run", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()])
        .status
        .success());
    let traces: Vec<String> = ["trace_aparl_seed3.csv", "trace_naive_seed3.csv"]
        .iter()
        .map(|n| dir.join(n).to_str().unwrap().to_string())
        .collect();
    let mut args = vec!["plotdata", "--out", dir.to_str().unwrap()];
    args.extend(traces.iter().map(|s| s.as_str()));
    let out = parl(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(
        String::from_utf8_lossy(&out.stderr).is_empty(),
        "no schema warnings"
    );
}

#[test]
fn plotdata_schema_mismatch_names_column() {
    let dir = tmp_dir("plotbad");
    let bad = dir.join("trace_aparl_seed0.csv");
    std::fs::write(&bad, "iteration,foo\n0,1\n").unwrap();
    let out = parl(&[
        "plotdata",
        "--out",
        dir.to_str().unwrap(),
        bad.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("align_return"));
}

#[test]
fn list_envs_names_registry() {
    let out = parl(&["list-envs"]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    for name in ["gridworld-goal", "rlhf-2state", "rlhf-gridworld", "chain", "file"] {
        assert!(stdout.contains(name));
    }
}

#[test]
fn file_env_loads_mdp_text() {
    let dir = tmp_dir("fileenv");
    let mdp_path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/chain4.mdp")
        .canonicalize()
        .unwrap();
    let cfg = write_cfg(
        &dir,
        "file.cfg",
        &format!(
            "[experiment]\nseeds = 1\nmethods = aparl\n\n[env]\nkind = file\npath = {}\n\n\
             [run]\nouter_iters = 1\nk = 2\ndamping = 1.0\n\n[objective]\nkind = rlhf\npairs_per_iter = 2\n",
            mdp_path.display()
        ),
    );
    let out = parl(&["run", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn runtime_failure_exits_3_with_partial_trace() {
    let dir = tmp_dir("abort");
    let cfg = write_cfg(
        &dir,
        "abort.cfg",
        &TINY_RLHF.replace("step_size_upper = 0.1", "step_size_upper = inf"),
    );
    let out = parl(&["run", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    // The partial trace was flushed.
    let trace = std::fs::read_to_string(dir.join("trace_aparl_seed3.csv")).unwrap();
    assert!(trace.lines().count() >= 2);
}

#[test]
fn datasets_and_checkpoints_round_trip() {
    let dir = tmp_dir("persist");
    let cfg = write_cfg(&dir, "tiny.cfg", TINY_RLHF);
    assert!(parl(&["run", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()])
        .status
        .success());
    // The run persisted the labeled pairs and final parameters.
    let pairs_path = dir.join("pairs_aparl_seed3.txt");
    let pairs = std::fs::read_to_string(&pairs_path).unwrap();
    assert_eq!(pairs.lines().count(), 25, "5 pairs per iteration x 5 records");
    assert!(dir.join("nu_aparl_seed3.txt").exists());
    assert!(dir.join("theta_aparl_seed3.txt").exists());

    // A new run can reload both the dataset and the checkpoints.
    let reload_cfg = write_cfg(
        &dir,
        "reload.cfg",
        &format!(
            "{TINY_RLHF}\n[init]\ndataset = {}\nnu0 = file:{}\n",
            pairs_path.display(),
            dir.join("nu_aparl_seed3.txt").display()
        ),
    );
    let dir2 = tmp_dir("persist2");
    let out = parl(&["run", reload_cfg.to_str().unwrap(), "--out", dir2.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let reloaded = std::fs::read_to_string(dir2.join("pairs_aparl_seed3.txt")).unwrap();
    assert_eq!(reloaded.lines().count(), 50, "preloaded 25 + 25 fresh");
    // The preloaded prefix is carried through verbatim.
    assert!(reloaded.starts_with(&pairs));
}

/// The shipped standard experiment, run through the binary: the summary must
/// reproduce the paired-seed alignment property, and the aggregated mean
/// series must end with the full method above the baseline.
#[test]
fn shipped_config_reproduces_paired_seed_property() {
    let dir = tmp_dir("shipped");
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/rlhf-gridworld.cfg");
    let out = parl(&["run", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // Parse the summary: method,seed,final_align_return,final_stationarity,oracle_return.
    let summary = std::fs::read_to_string(dir.join("summary.csv")).unwrap();
    let mut aparl = std::collections::BTreeMap::new();
    let mut naive = std::collections::BTreeMap::new();
    let mut oracle = 0.0f64;
    for line in summary.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let seed: u64 = f[1].parse().unwrap();
        let align: f64 = f[2].parse().unwrap();
        oracle = f[4].parse().unwrap();
        match f[0] {
            "aparl" => aparl.insert(seed, align),
            "naive" => naive.insert(seed, align),
            other => panic!("unexpected method {other}"),
        };
    }
    assert_eq!(aparl.len(), 5);
    assert_eq!(naive.len(), 5);
    let wins = aparl
        .iter()
        .filter(|(seed, a)| **a >= naive[seed])
        .count();
    assert!(wins >= 4, "aparl >= naive on {wins}/5 seeds");
    let reached = aparl.values().filter(|a| **a >= 0.9 * oracle).count();
    assert_eq!(reached, 5, "aparl reached 90% of oracle on {reached}/5 seeds");

    // Aggregate with plotdata and check the terminal means.
    let traces: Vec<String> = std::fs::read_dir(&dir)
        .unwrap()
        .filter_map(|e| {
            let p = e.unwrap().path();
            let name = p.file_name().unwrap().to_str().unwrap().to_string();
            (name.starts_with("trace_") && name.ends_with(".csv"))
                .then(|| p.to_str().unwrap().to_string())
        })
        .collect();
    assert_eq!(traces.len(), 10);
    let oracle_arg = format!("{oracle}");
    let mut args = vec!["plotdata", "--oracle", &oracle_arg, "--out"];
    args.push(dir.to_str().unwrap());
    args.extend(traces.iter().map(|s| s.as_str()));
    assert!(parl(&args).status.success());
    let plot = std::fs::read_to_string(dir.join("plot_align.csv")).unwrap();
    let header: Vec<&str> = plot.lines().next().unwrap().split(',').collect();
    let a_col = header.iter().position(|c| *c == "aparl_mean").unwrap();
    let n_col = header.iter().position(|c| *c == "naive_mean").unwrap();
    let last: Vec<&str> = plot.lines().last().unwrap().split(',').collect();
    let a_mean: f64 = last[a_col].parse().unwrap();
    let n_mean: f64 = last[n_col].parse().unwrap();
    assert!(
        a_mean > n_mean,
        "terminal means: aparl {a_mean} vs naive {n_mean}"
    );
}
