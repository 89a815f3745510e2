use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pfedgate"));
    cmd.env_remove("PFEDGATE_OUTPUT_DIR");
    cmd
}

fn tiny_config(method: &str, rounds: usize) -> Value {
    json!({
        "data": {
            "source": {"synthetic": {"n_classes": 5, "feature_dim": 16, "noise_std": 0.5, "samples_per_client": 60}},
            "partition": {"dirichlet": {"alpha": 0.4}},
            "n_clients": 6,
            "seed": 1
        },
        "model": {"hidden_widths": [16, 16], "bias": false},
        "gating": {"sparsity": {"global": 0.5}},
        "training": {"method": method, "rounds": rounds, "lr_model": 0.5, "lr_gate": 0.5},
        "output": {"dir": "out"}
    })
}

fn write(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn text(out: &Output) -> (String, String) {
    (
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "cfg.json", &tiny_config("pfedgate", 3));
    let out = bin().arg("run").arg(&cfg).current_dir(dir.path()).output().unwrap();
    let (stdout, stderr) = text(&out);
    assert!(out.status.success(), "{stderr}");
    assert!(stdout.contains("round 3: avg_acc="), "{stdout}");
    assert!(stdout.contains("bottom_decile_acc=") && stdout.contains("achieved_sparsity="));

    let run_dir = dir.path().join("out");
    let metrics = fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let summary: Value = serde_json::from_str(&fs::read_to_string(run_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["method"], "pfedgate");
    assert_eq!(summary["final"]["round"], 3);
    assert!(run_dir.join("gates.json").exists());
    assert!(run_dir.join("checkpoints/final/manifest.json").exists());
}

#[test]
fn output_dir_can_be_overridden_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "cfg.json", &tiny_config("fedavg", 1));
    let elsewhere = dir.path().join("elsewhere");
    let out = bin()
        .arg("run")
        .arg(&cfg)
        .current_dir(dir.path())
        .env("PFEDGATE_OUTPUT_DIR", &elsewhere)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(elsewhere.join("metrics.jsonl").exists());
    assert!(!dir.path().join("out").exists());
}

#[test]
fn untrained_fedavg_is_at_chance_level() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config("fedavg", 0);
    cfg["data"]["n_clients"] = json!(20);
    cfg["data"]["source"]["synthetic"]["samples_per_client"] = json!(200);
    let path = write(dir.path(), "cfg.json", &cfg);
    let out = bin().arg("run").arg(&path).current_dir(dir.path()).output().unwrap();
    assert!(out.status.success());
    let summary: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["rounds"], 0);
    let acc = summary["final"]["avg_acc"].as_f64().unwrap();
    assert!((acc - 0.2).abs() < 0.1, "untrained accuracy {acc}");
    assert_eq!(fs::read_to_string(dir.path().join("out/metrics.jsonl")).unwrap(), "");
}

#[test]
fn identical_runs_give_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "cfg.json", &tiny_config("pfedgate", 3));
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let target = dir.path().join(name);
        let out = bin()
            .arg("run")
            .arg(&cfg)
            .env("PFEDGATE_OUTPUT_DIR", &target)
            .output()
            .unwrap();
        assert!(out.status.success());
        files.push(fs::read(target.join("metrics.jsonl")).unwrap());
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn validate_accepts_a_good_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "cfg.json", &tiny_config("pfedgate", 3));
    let out = bin().arg("validate").arg(&cfg).output().unwrap();
    let (stdout, _) = text(&out);
    assert!(out.status.success());
    assert!(stdout.starts_with("ok: method=pfedgate clients=6"), "{stdout}");
    assert!(!dir.path().join("out").exists(), "validate must not run anything");
}

#[test]
fn validate_names_a_missing_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config("pfedgate", 3);
    cfg["training"].as_object_mut().unwrap().remove("lr_gate");
    let path = write(dir.path(), "cfg.json", &cfg);
    let out = bin().arg("validate").arg(&path).output().unwrap();
    let (_, stderr) = text(&out);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr.contains("missing field `lr_gate`"), "{stderr}");
}

#[test]
fn validate_rejects_an_empty_client_list() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config("pfedgate", 3);
    cfg["data"]["n_clients"] = json!(0);
    let path = write(dir.path(), "cfg.json", &cfg);
    let out = bin().arg("validate").arg(&path).output().unwrap();
    let (_, stderr) = text(&out);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr.contains("`data.n_clients`"), "{stderr}");
}

#[test]
fn infeasible_budget_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config("pfedgate", 3);
    cfg["gating"]["sparsity"] = json!({"global": 0.01});
    let path = write(dir.path(), "cfg.json", &cfg);
    let out = bin().arg("run").arg(&path).current_dir(dir.path()).output().unwrap();
    let (_, stderr) = text(&out);
    assert!(!out.status.success());
    assert!(stderr.contains("infeasible sparsity 0.01"), "{stderr}");
    assert!(!dir.path().join("out/metrics.jsonl").exists());
}

#[test]
fn missing_config_file_is_an_error() {
    let out = bin().arg("run").arg("/nonexistent/cfg.json").output().unwrap();
    let (_, stderr) = text(&out);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr.starts_with("error: io error"), "{stderr}");
}

#[test]
fn dump_gates_prints_every_client() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "cfg.json", &tiny_config("pfedgate", 2));
    assert!(bin()
        .arg("run")
        .arg(&cfg)
        .current_dir(dir.path())
        .output()
        .unwrap()
        .status
        .success());

    let ckpt = dir.path().join("out/checkpoints/final");
    for target in [ckpt.clone(), ckpt.join("manifest.json")] {
        let out = bin().arg("dump-gates").arg(&target).output().unwrap();
        assert!(out.status.success());
        let dump: Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(dump["round"], 2);
        let clients = dump["clients"].as_array().unwrap();
        assert_eq!(clients.len(), 6);
        let expected: u64 = dump["param_shapes"]
            .as_array()
            .unwrap()
            .iter()
            .map(|s| s[0].as_u64().unwrap() * s[1].as_u64().unwrap())
            .sum();
        for c in clients {
            assert_eq!(c["phi"].as_array().unwrap().len() as u64, expected);
        }
    }

    let missing = bin().arg("dump-gates").arg(dir.path().join("nope")).output().unwrap();
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = bin().arg("train").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
