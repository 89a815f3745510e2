//! Builds a federation from a [`RunConfig`] and drives it to completion,
//! writing metrics, checkpoints, gate dumps and a summary.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::blocks::BlockPartition;
use crate::checkpoint;
use crate::config::{DataSource, PartitionScheme, RunConfig};
use crate::data::{dirichlet_partition, load_csv, pathological_partition, random_rotation, split_train_val_test};
use crate::error::Result;
use crate::federation::{ClientData, ClientState, Engine, Federation, NovelReport, ServerState};
use crate::gating::GatingLayer;
use crate::metrics::{best_round, JsonlWriter, RoundRecord};
use crate::seed::{stream, Purpose};

/// Overrides `output.dir` when set.
pub const OUTPUT_DIR_ENV: &str = "PFEDGATE_OUTPUT_DIR";

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const GATES_FILE: &str = "gates.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub struct Experiment {
    pub config: RunConfig,
    pub config_hash: String,
    pub federation: Federation,
    /// Held-out clients, adapted only after training.
    pub novel: Vec<ClientState>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinalScores {
    pub round: usize,
    pub avg_acc: f64,
    pub bottom_decile_acc: f64,
    pub val_acc: f64,
    pub achieved_sparsity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub method: crate::federation::Method,
    pub config_hash: String,
    pub rounds: usize,
    pub n_params: usize,
    pub n_blocks: usize,
    pub gating_head_params: usize,
    pub n_participants: usize,
    pub n_novel: usize,
    #[serde(rename = "final")]
    pub final_scores: FinalScores,
    pub best_round: Option<RoundRecord>,
    pub total_upload_floats: usize,
    pub novel: Option<NovelReport>,
}

/// Data, partition, clients and initial model exactly as the config says.
pub fn build(cfg: &RunConfig) -> Result<Experiment> {
    cfg.validate()?;
    let seed = cfg.data.seed;
    let n_clients = cfg.data.n_clients;
    let (dataset, rotation_strength) = match &cfg.data.source {
        DataSource::Synthetic(s) => (
            s.task().generate(s.samples_per_client * n_clients, seed)?,
            s.rotation_strength,
        ),
        DataSource::Csv { path } => (load_csv(path)?, 0.0),
    };
    let mut part_rng = stream(seed, Purpose::Partition, 0, 0);
    let partition = match cfg.data.partition {
        PartitionScheme::Dirichlet { alpha } => dirichlet_partition(
            dataset.labels(),
            dataset.n_classes(),
            n_clients,
            alpha,
            cfg.data.min_client_samples,
            &mut part_rng,
        )?,
        PartitionScheme::Pathological { shards_per_client } => {
            pathological_partition(dataset.labels(), n_clients, shards_per_client, &mut part_rng)?
        }
    };

    let spec = cfg.model_spec(dataset.dim(), dataset.n_classes())?;
    let blocks = BlockPartition::split(&spec, cfg.gating.block_factor, cfg.gating.s_min)?;
    cfg.validate_budgets(&blocks)?;
    let budgets = cfg.budgets();

    let mut ids: Vec<usize> = (0..n_clients).collect();
    ids.shuffle(&mut stream(seed, Purpose::Holdout, 0, 0));
    let mut novel_ids = ids[..cfg.n_novel()].to_vec();
    novel_ids.sort_unstable();

    let mut participants = Vec::new();
    let mut novel = Vec::new();
    for (id, indices) in partition.clients.iter().enumerate() {
        let split = split_train_val_test(indices, &mut stream(seed, Purpose::Split, id as u64, 0));
        let mut data = ClientData {
            train: dataset.subset(&split.train),
            val: dataset.subset(&split.val),
            test: dataset.subset(&split.test),
        };
        if rotation_strength > 0.0 {
            let r = random_rotation(
                dataset.dim(),
                rotation_strength,
                &mut stream(seed, Purpose::Rotation, id as u64, 0),
            );
            data = ClientData {
                train: data.train.rotated(&r)?,
                val: data.val.rotated(&r)?,
                test: data.test.rotated(&r)?,
            };
        }
        let phi = GatingLayer::new(
            dataset.dim(),
            blocks.n_blocks(),
            &mut stream(seed, Purpose::GateInit, id as u64, 0),
        );
        let client = ClientState {
            id,
            data,
            phi,
            sparsity: budgets[id],
            theta: None,
        };
        if novel_ids.binary_search(&id).is_ok() {
            novel.push(client);
        } else {
            participants.push(client);
        }
    }

    let theta0 = spec.init_params(&mut stream(seed, Purpose::ModelInit, 0, 0));
    let engine = Engine {
        spec,
        partition: blocks.clone(),
        gating: cfg.gating.options(),
        settings: cfg.training.settings(),
    };
    let server = ServerState::new(theta0, blocks)?;
    let federation = Federation::new(
        engine,
        server,
        participants,
        cfg.training.method,
        cfg.training.sample_fraction,
        seed,
        cfg.training.parallel,
    )?;
    Ok(Experiment {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        federation,
        novel,
    })
}

/// `$PFEDGATE_OUTPUT_DIR` if set, otherwise `output.dir`.
pub fn output_dir(cfg: &RunConfig) -> PathBuf {
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => cfg.output.dir.clone(),
    }
}

impl Experiment {
    fn summarize(&self, records: &[RoundRecord], novel: Option<NovelReport>) -> Result<RunSummary> {
        let fed = &self.federation;
        let final_scores = match records.last() {
            Some(r) => FinalScores {
                round: r.round,
                avg_acc: r.avg_acc,
                bottom_decile_acc: r.bottom_decile_acc,
                val_acc: r.val_acc,
                achieved_sparsity: r.achieved_sparsity,
            },
            None => {
                let s = fed.evaluate()?;
                FinalScores {
                    round: fed.round(),
                    avg_acc: s.avg_acc,
                    bottom_decile_acc: s.bottom_decile_acc,
                    val_acc: s.val_acc,
                    achieved_sparsity: s.achieved_sparsity,
                }
            }
        };
        Ok(RunSummary {
            method: fed.method,
            config_hash: self.config_hash.clone(),
            rounds: records.len(),
            n_params: fed.engine.spec.n_params(),
            n_blocks: fed.engine.partition.n_blocks(),
            gating_head_params: fed.clients[0].phi.head_param_count(),
            n_participants: fed.clients.len(),
            n_novel: self.novel.len(),
            final_scores,
            best_round: best_round(records).cloned(),
            total_upload_floats: records.iter().map(|r| r.upload_floats).sum(),
            novel,
        })
    }

    fn adapt_novel(&self) -> Result<Option<NovelReport>> {
        if self.novel.is_empty() {
            return Ok(None);
        }
        let report = self
            .federation
            .adapt_novel(&self.novel, self.config.novel.adapt_epochs)?;
        Ok(Some(report))
    }

    /// Runs every round without touching the filesystem.
    pub fn run_in_memory(&mut self) -> Result<(Vec<RoundRecord>, RunSummary)> {
        let records = self.federation.run(self.config.training.rounds)?;
        let novel = self.adapt_novel()?;
        let summary = self.summarize(&records, novel)?;
        Ok((records, summary))
    }

    /// Runs every round, writing `metrics.jsonl`, periodic and final
    /// checkpoints, `gates.json` and `summary.json` under `dir`.
    pub fn run_to_dir(&mut self, dir: &Path) -> Result<RunSummary> {
        fs::create_dir_all(dir)?;
        let ckpt_root = dir.join(CHECKPOINT_DIR);
        let mut writer = JsonlWriter::create(&dir.join(METRICS_FILE))?;
        let every = self.config.output.checkpoint_every;
        let mut records = Vec::with_capacity(self.config.training.rounds);
        for _ in 0..self.config.training.rounds {
            let record = self.federation.run_round()?;
            writer.write(&record)?;
            if every > 0 && record.round % every == 0 {
                checkpoint::save(
                    &ckpt_root.join(format!("round_{:05}", record.round)),
                    &self.federation,
                    &self.config_hash,
                )?;
            }
            records.push(record);
        }
        writer.finish()?;

        let final_dir = ckpt_root.join("final");
        checkpoint::save(&final_dir, &self.federation, &self.config_hash)?;
        let gates = checkpoint::dump_gates(&final_dir)?;
        fs::write(dir.join(GATES_FILE), serde_json::to_string(&gates)?)?;

        let novel = self.adapt_novel()?;
        let summary = self.summarize(&records, novel)?;
        fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
        Ok(summary)
    }
}
