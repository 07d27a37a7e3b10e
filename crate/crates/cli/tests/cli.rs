use std::process::{Command, Output};

use serde_json::Value;

fn qkdrecon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qkdrecon"))
        .args(args)
        .env_remove("QKDRECON_SEED")
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "bad json ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn without_timestamp(mut v: Value) -> Value {
    v["manifest"]
        .as_object_mut()
        .unwrap()
        .remove("timestamp")
        .expect("timestamp present");
    v
}

const SYSTEM: [&str; 6] = ["--n", "1e6", "--delta", "0.05", "--epsilon", "1e-6"];

#[test]
fn optimize_eers_reproduces_table_point() {
    let mut args = vec!["optimize", "--method", "eers"];
    args.extend(SYSTEM);
    let out = qkdrecon(&args);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    let buffer = v["result"]["best_config"]["buffer"].as_f64().unwrap();
    let excess = v["result"]["best_report"]["excess_loss"].as_f64().unwrap();
    assert!((buffer - 0.0126).abs() < 5e-4, "{buffer}");
    assert!((excess - 0.075).abs() < 2e-3, "{excess}");
    assert_eq!(v["manifest"]["subcommand"], "optimize");
    assert_eq!(v["manifest"]["params"]["n"], 1_000_000);
    assert!(v["manifest"]["version"].is_string());
}

#[test]
fn analyze_parity_needs_twenty_bits() {
    let mut args = vec!["analyze", "--method", "verify-parity", "--buffer", "0.01", "--sigma", "0"];
    args.extend(SYSTEM);
    let out = qkdrecon(&args);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json(&out)["result"]["verify_bits"], 20);
}

#[test]
fn sweep_with_reversed_range_is_usage_error() {
    let out = qkdrecon(&[
        "sweep", "--vary", "delta", "--from", "0.1", "--to", "0.01", "--steps", "10", "--n", "1e6",
        "--epsilon", "1e-6",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--from"));
}

#[test]
fn sweep_emits_manifest_and_fixed_columns() {
    let out = qkdrecon(&[
        "sweep", "--vary", "delta", "--from", "0.01", "--to", "0.1", "--steps", "10", "--n", "1e6",
        "--epsilon", "1e-6", "--method", "eers", "--method", "verify-parity", "--format", "csv",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    let manifest = lines.next().unwrap().strip_prefix("# manifest: ").unwrap();
    let manifest: Value = serde_json::from_str(manifest).unwrap();
    assert_eq!(manifest["subcommand"], "sweep");
    assert_eq!(
        lines.next().unwrap(),
        "vary,value,method,buffer,excess_loss,sample_size,verify_bits,p_error,p_undetected,converged,error"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 20);
    assert!(rows.iter().all(|r| r.len() == 11));
    assert_eq!(rows[2][1], "0.02");
    assert_eq!((rows[2][2], rows[3][2]), ("eers", "verify-parity"));
    for pair in rows.chunks(2) {
        let eers: f64 = pair[0][4].parse().unwrap();
        let verify: f64 = pair[1][4].parse().unwrap();
        assert!(verify < eers);
    }
}

#[test]
fn unknown_flag_and_missing_flag_are_usage_errors() {
    let mut args = vec!["optimize", "--method", "eers", "--bogus", "1"];
    args.extend(SYSTEM);
    assert_eq!(qkdrecon(&args).status.code(), Some(2));
    assert_eq!(qkdrecon(&["optimize", "--method", "eers", "--n", "1e6"]).status.code(), Some(2));
    let mut args = vec!["optimize", "--method", "nope"];
    args.extend(SYSTEM);
    assert_eq!(qkdrecon(&args).status.code(), Some(2));
}

#[test]
fn csv_format_rejected_for_json_commands() {
    let mut args = vec!["optimize", "--method", "eers", "--format", "csv"];
    args.extend(SYSTEM);
    assert_eq!(qkdrecon(&args).status.code(), Some(2));
}

#[test]
fn out_of_domain_values_exit_three() {
    let out = qkdrecon(&["optimize", "--method", "eers", "--n", "1e6", "--delta", "0.6", "--epsilon", "1e-6"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("0.6"));
    let out = qkdrecon(&["optimize", "--method", "eers", "--n", "1e6", "--delta", "0.05", "--epsilon", "2"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn boundary_optimum_exits_four_with_result() {
    // with no block-rate spread the verification optimum sits on the lower bound
    let mut args = vec!["optimize", "--method", "verify-parity", "--sigma", "0"];
    args.extend(SYSTEM);
    let out = qkdrecon(&args);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(json(&out)["result"]["converged"], false);
}

#[test]
fn simulate_is_reproducible_from_seed() {
    let args = [
        "simulate", "--method", "verify-mindist", "--n", "1e5", "--delta", "0.05", "--epsilon", "1e-2",
        "--sigma", "0.002", "--buffer", "0.003", "--blocks", "2000", "--trials", "1000", "--seed", "42",
    ];
    let a = qkdrecon(&args);
    let b = qkdrecon(&args);
    assert_eq!(a.status.code(), Some(0));
    let (a, b) = (without_timestamp(json(&a)), without_timestamp(json(&b)));
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a["manifest"]["seed"], 42);
    let outcome = &a["result"]["outcome"];
    let total = outcome["blocks_total"].as_u64().unwrap();
    let parts = ["blocks_corrected", "blocks_discarded", "failures_undetected"]
        .iter()
        .map(|k| outcome[k].as_u64().unwrap())
        .sum::<u64>();
    assert_eq!((total, parts), (2000, 2000));
    assert_eq!(a["result"]["forced_failure"]["trials"], 1000);
}

#[test]
fn seed_falls_back_to_environment() {
    let args = [
        "simulate", "--method", "eers", "--n", "1e5", "--delta", "0.05", "--epsilon", "1e-2",
        "--blocks", "200",
    ];
    let run = |seed: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_qkdrecon"))
            .args(args)
            .env("QKDRECON_SEED", seed)
            .output()
            .unwrap();
        json(&out)
    };
    assert_eq!(run("7")["manifest"]["seed"], 7);
    assert_eq!(run("8")["manifest"]["seed"], 8);
}

#[test]
fn trace_workflow_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("clavis.csv");
    let path_str = path.to_str().unwrap();
    let out = qkdrecon(&["trace", "synth", "--kind", "clavis", "--blocks", "500", "--seed", "3", "--out", path_str]);
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("block_index,error_rate\n0,"));
    assert_eq!(text.lines().count(), 501);

    let stats = json(&qkdrecon(&["trace", "stats", "--file", path_str]));
    let max_jump = stats["result"]["max_jump"].as_f64().unwrap();
    assert!(max_jump > 0.0 && max_jump <= 0.004);
    assert_eq!(stats["result"]["windows"].as_array().unwrap().len(), 10);

    let jump = max_jump.to_string();
    let replay = qkdrecon(&[
        "trace", "replay", "--file", path_str, "--n", "2.6e6", "--epsilon", "1e-6", "--method",
        "verify-parity", "--buffer", &jump, "--method", "eers", "--buffer", "0.009",
    ]);
    assert_eq!(replay.status.code(), Some(0));
    let replay = json(&replay);
    assert_eq!(replay["result"][0]["discarded"], 0);
    assert_eq!(replay["result"][1]["config"]["method"], "eers");

    let rec = json(&qkdrecon(&["trace", "recommend", "--file", path_str, "--n", "2.6e6", "--epsilon", "1e-6"]));
    let method = rec["result"]["method"].as_str().unwrap();
    assert!(method.starts_with("verify"), "{method}");
}

#[test]
fn malformed_trace_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "block_index,error_rate\n0,0.016\n1,0.017\n2,0.6\n").unwrap();
    let out = qkdrecon(&["trace", "stats", "--file", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 4"));
}

#[test]
fn identical_optimize_runs_give_identical_bytes() {
    let mut args = vec!["optimize", "--method", "combo"];
    args.extend(SYSTEM);
    let a = without_timestamp(json(&qkdrecon(&args)));
    let b = without_timestamp(json(&qkdrecon(&args)));
    assert_eq!(a, b);
    let excess = a["result"]["best_report"]["excess_loss"].as_f64().unwrap();
    assert!((excess - 0.053).abs() < 2e-3);
}
