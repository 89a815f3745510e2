//! Every config under `configs/` parses, builds and runs a couple of rounds.

use std::path::{Path, PathBuf};

use pfedgate::config::RunConfig;
use pfedgate::experiment::build;

fn shipped() -> Vec<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths
}

#[test]
fn all_shipped_configs_run() {
    let paths = shipped();
    assert!(paths.len() >= 10, "{paths:?}");
    for path in paths {
        let mut cfg = RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.training.rounds = 2;
        let mut exp = build(&cfg).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let (records, summary) = exp.run_in_memory().unwrap();
        assert_eq!(records.len(), 2, "{}", path.display());
        let acc = summary.final_scores.avg_acc;
        assert!((0.0..=1.0).contains(&acc), "{}: {acc}", path.display());
        assert_eq!(summary.novel.is_some(), cfg.novel.holdout_fraction > 0.0);
    }
}

#[test]
fn budgets_hold_per_client() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/csv_per_client.json");
    let mut cfg = RunConfig::load(&path).unwrap();
    cfg.training.rounds = 1;
    let mut exp = build(&cfg).unwrap();
    exp.federation.run(1).unwrap();
    let fed = &exp.federation;
    for c in &fed.clients {
        let eval = fed.engine.evaluate_gated(fed.theta(), c, &c.phi, &c.data.test).unwrap();
        assert!(
            eval.max_sparsity <= c.sparsity,
            "client {} at {} > {}",
            c.id,
            eval.max_sparsity,
            c.sparsity
        );
    }
}
