use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mateloc_cli::{parse_manifest, CliError, Command as Cmd};

fn mateloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mateloc")).args(args).env_remove("MATELOC_OUTPUT_DIR").output().unwrap()
}

fn write(dir: &Path, name: &str, json: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, json).unwrap();
    p.to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn minimal_manifest_gets_defaults() {
    let m = parse_manifest(r#"{"command": "train", "seed": 4, "model": {"kind": "d2l", "hidden": [8], "input": "raw", "num_antennas": 2, "num_subcarriers": 2}, "datasets": {"train": ["a.alds"]}}"#).unwrap();
    assert_eq!(m.command, Cmd::Train);
    assert_eq!(m.train.batch_size, 64);
    assert_eq!(m.train.seed, 4);
    assert_eq!(m.eval.options.neighbors, 32);
    assert_eq!(m.output_dir, Path::new("runs"));
}

#[test]
fn unknown_keys_and_bad_types_are_named() {
    match parse_manifest(r#"{"command": "gradcheck", "seed": 1, "foo": 3}"#) {
        Err(CliError::Config { message, .. }) => assert!(message.contains("foo"), "{message}"),
        other => panic!("{other:?}"),
    }
    match parse_manifest(r#"{"command": "gradcheck", "seed": 1, "train": {"steps": "many"}}"#) {
        Err(CliError::Config { key, message }) => {
            assert_eq!(key, "train.steps");
            assert!(message.contains("u64"), "{message}");
        }
        other => panic!("{other:?}"),
    }
    match parse_manifest(r#"{"command": "gradcheck"}"#) {
        Err(CliError::Config { message, .. }) => assert!(message.contains("seed"), "{message}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn effective_config_round_trips() {
    let m = parse_manifest(r#"{"command": "experiment", "seed": 12, "experiment": {"lab": {"train_samples": 50}}}"#).unwrap();
    let text = serde_json::to_string_pretty(&m).unwrap();
    assert_eq!(parse_manifest(&text).unwrap(), m);
}

#[test]
fn usage_errors_exit_with_two() {
    let o = mateloc(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "m.json", r#"{"command": "eval", "seed": 1, "bogus": true}"#);
    let o = mateloc(&["eval", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
    let cfg = write(dir.path(), "g.json", r#"{"command": "gradcheck", "seed": 1}"#);
    assert_eq!(mateloc(&["train", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn missing_inputs_are_runtime_errors_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "m.json",
        r#"{"command": "eval", "seed": 1, "eval": {"checkpoint": "nope/model"}, "datasets": {"train": ["a.alds"], "test": ["b.alds"]}}"#,
    );
    let o = mateloc(&["eval", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope/model.json"));
}

#[test]
fn gradcheck_passes_the_gate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "g.json", r#"{"command": "gradcheck", "seed": 2, "gradcheck": {"probes": 5, "samples": 120}}"#);
    let o = mateloc(&["gradcheck", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.starts_with("PASS max relative gradient error"), "{out}");
    assert!(dir.path().join("runs/gradcheck.json").exists());
}

#[test]
fn generate_train_eval_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let scen = write(d, "s.json", r#"{"command": "gen-scenario", "seed": 1000, "output_dir": "s", "generate": {"ids": [1]}}"#);
    assert!(mateloc(&["gen-scenario", "-c", &scen]).status.success());
    let data = write(
        d,
        "d.json",
        r#"{"command": "gen-dataset", "seed": 3, "output_dir": "d", "scenarios": ["s/scenarios/scenario_1.json"], "generate": {"train_samples": 150, "test_samples": 20}}"#,
    );
    assert!(mateloc(&["gen-dataset", "-c", &data]).status.success());
    let train = r#"{"command": "train", "seed": 5, "datasets": {"train": ["d/datasets/scenario_1_train.alds"]},
        "model": {"kind": "mateformer", "depth": 1, "d_model": 8, "d_ff": 8, "heads": 2, "num_antennas": 8, "num_subcarriers": 8},
        "train": {"steps": 20, "batch_size": 2, "neighbors": 8, "p_range": [2, 8], "q_range": [1, 2], "log_every": 10}}"#;
    let train = write(d, "t.json", train);
    let eval = |ckpt: &str, out: &str| {
        let m = format!(
            r#"{{"command": "eval", "seed": 5, "output_dir": "{out}", "eval": {{"checkpoint": "{ckpt}", "options": {{"neighbors": 8}}}},
            "datasets": {{"train": ["d/datasets/scenario_1_train.alds"], "test": ["d/datasets/scenario_1_test.alds"]}}}}"#
        );
        let p = write(d, &format!("{out}.json"), &m);
        let o = mateloc(&["eval", "-c", &p]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    for run in ["r1", "r2"] {
        let o = mateloc(&["train", "-c", &train, "--out", &d.join(run).to_string_lossy()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(d.join(run).join("effective_config.json").exists());
    }
    let (a, b) = (eval("r1/model", "e1"), eval("r2/model", "e2"));
    assert_eq!(a, b);
    assert!(a.contains("mateformer on scenario 1"), "{a}");
    assert_eq!(fs::read(d.join("r1/model.bin")).unwrap(), fs::read(d.join("r2/model.bin")).unwrap());

    // Output directories are write-once.
    let o = mateloc(&["train", "-c", &train, "--out", &d.join("r1").to_string_lossy()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn cross_scenario_experiment_table() {
    let dir = tempfile::tempdir().unwrap();
    let m = r#"{"command": "experiment", "seed": 8, "experiment": {"lab": {
        "scenarios": [], "train_samples": 150, "test_samples": 20,
        "mateformer": {"depth": 1, "d_model": 8, "d_ff": 8, "heads": 2, "num_antennas": 8, "num_subcarriers": 8},
        "d2l_hidden": [8],
        "analogy_train": {"steps": 10, "batch_size": 2, "neighbors": 8, "p_range": [2, 8], "q_range": [1, 2], "log_every": 5},
        "d2l_train": {"steps": 10, "batch_size": 8, "log_every": 5},
        "eval": {"neighbors": 8}}}}"#;
    let scen = write(dir.path(), "s.json", r#"{"command": "gen-scenario", "seed": 1000, "output_dir": "s", "generate": {"ids": [1, 2]}}"#);
    assert!(mateloc(&["gen-scenario", "-c", &scen]).status.success());
    let mut v: serde_json::Value = serde_json::from_str(m).unwrap();
    v["scenarios"] = serde_json::json!(["s/scenarios/scenario_1.json", "s/scenarios/scenario_2.json"]);
    let cfg = write(dir.path(), "x.json", &v.to_string());
    let o = mateloc(&["experiment", "cross-scenario", "-c", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("runs/cross-scenario.csv")).unwrap();
    // Header plus 2 scenarios × 2 models.
    assert_eq!(csv.lines().count(), 1 + 4);
    assert!(csv.starts_with("experiment,model,train_scenarios,eval_scenario,mode,sweep_param,sweep_value,mean_m"));
    assert_eq!(mateloc(&["experiment", "no-such-protocol", "-c", &cfg]).status.code(), Some(2));
}
