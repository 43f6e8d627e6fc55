use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn basepar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_basepar"))
        .args(args)
        .env_remove("BASEPAR_SEED")
        .output()
        .expect("binary runs")
}

fn default_scenario() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/default.toml")
}

fn path_arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_lists_every_flag() {
    let out = basepar(&["run", "--help"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for flag in [
        "--scenario",
        "--seed",
        "--budget-s",
        "--ftol",
        "--xtol",
        "--termination",
        "--out",
        "--serial",
        "--controller",
    ] {
        assert!(text.contains(flag), "missing {flag}");
    }
    let out = basepar(&["--help"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for cmd in ["run", "compare", "train-ann", "emit-plots", "validate-scenario"] {
        assert!(text.contains(cmd), "missing {cmd}");
    }
}

#[test]
fn bad_usage_exits_with_two() {
    assert_eq!(basepar(&["run", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(basepar(&["run", "--termination", "sometimes"]).status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_with_one() {
    let out = basepar(&["validate-scenario", "--scenario", "/nonexistent/scenario.toml"]);
    assert_eq!(out.status.code(), Some(1));
    let out = basepar(&["run", "--controller", "nonsense", "--serial"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn shipped_scenario_validates() {
    let out = basepar(&["validate-scenario", "--scenario", path_arg(&default_scenario())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8(out.stdout).unwrap().contains("is valid"));
}

#[test]
fn serial_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let res = basepar(&[
            "run",
            "--scenario",
            path_arg(&default_scenario()),
            "--seed",
            "7",
            "--serial",
            "--out",
            path_arg(out),
        ]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    }
    let la = std::fs::read(a.join("run_base-parallel.jsonl")).unwrap();
    let lb = std::fs::read(b.join("run_base-parallel.jsonl")).unwrap();
    assert!(!la.is_empty());
    assert_eq!(la, lb);
    assert!(String::from_utf8_lossy(&la).contains("\"seed\":7"));
}

#[test]
fn compare_reports_seven_rows_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let res = basepar(&["compare", "--serial", "--out", path_arg(out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let rows: Vec<serde_json::Value> = serde_json::from_str(&std::fs::read_to_string(out.join("compare.json")).unwrap()).unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r[0].as_str().unwrap()).collect();
    assert_eq!(labels, ["ALINEA", "ANN", "CMPC(1)", "CMPC(2)", "PMPC(1)", "PMPC(2)", "base-parallel"]);
    for stem in ["alinea", "ann", "cmpc_1", "cmpc_2", "pmpc_1", "pmpc_2", "base-parallel"] {
        assert!(out.join(format!("run_{stem}.jsonl")).exists(), "missing log for {stem}");
    }

    let plots = out.join("plots");
    let res = basepar(&["emit-plots", path_arg(&out.join("run_base-parallel.jsonl")), "--out", path_arg(&plots)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for f in ["demand.csv", "states.csv", "candidates.csv", "winners.csv", "cumulative.csv"] {
        assert!(plots.join(f).exists(), "missing {f}");
    }
}

#[test]
fn trained_parameters_load_back() {
    let dir = tempfile::tempdir().unwrap();
    let res = basepar(&["train-ann", "--out", path_arg(dir.path())]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let params = dir.path().join("ann_params.json");
    assert!(params.exists());

    // A scenario that points at the file runs the ANN row without retraining.
    let scenario = dir.path().join("scenario.toml");
    std::fs::write(
        &scenario,
        "name = \"with-params\"\n[run]\nsteps = 5\n[ann]\nparam_file = \"ann_params.json\"\n",
    )
    .unwrap();
    let res = basepar(&[
        "run",
        "--scenario",
        path_arg(&scenario),
        "--controller",
        "ANN",
        "--serial",
        "--out",
        path_arg(&dir.path().join("out")),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(dir.path().join("out/run_ann.jsonl").exists());
}
