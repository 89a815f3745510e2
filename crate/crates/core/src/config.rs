//! Run configuration: one JSON file with data, model, gating, training,
//! output and novel-client sections.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blocks::BlockPartition;
use crate::data::SyntheticTask;
use crate::error::{Error, Result};
use crate::federation::{Method, TrainSettings};
use crate::gating::GatingOptions;
use crate::model::ModelSpec;
use crate::seed::{stream, Purpose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub gating: GatingConfig,
    pub training: TrainingConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub novel: NovelConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub partition: PartitionScheme,
    pub n_clients: usize,
    /// Master seed for every random stream of the run.
    pub seed: u64,
    /// Floor on samples per client enforced by the Dirichlet partitioner.
    #[serde(default = "default_min_client_samples")]
    pub min_client_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSource),
    Csv { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    pub n_classes: usize,
    pub feature_dim: usize,
    pub noise_std: f64,
    #[serde(default)]
    pub rotation_strength: f64,
    pub samples_per_client: usize,
}

impl SyntheticSource {
    pub fn task(&self) -> SyntheticTask {
        SyntheticTask {
            n_classes: self.n_classes,
            feature_dim: self.feature_dim,
            noise_std: self.noise_std,
            rotation_strength: self.rotation_strength,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionScheme {
    Dirichlet { alpha: f64 },
    Pathological { shards_per_client: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_widths: Vec<usize>,
    #[serde(default = "yes")]
    pub bias: bool,
}

/// Sparsity budgets `s_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SparsitySpec {
    /// One budget for every client.
    Global(f64),
    /// One budget per client id.
    PerClient(Vec<f64>),
    /// Clients are shuffled into equal-sized groups, one per listed budget.
    Mixed(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatingConfig {
    #[serde(default = "default_block_factor")]
    pub block_factor: usize,
    #[serde(default = "default_s_min")]
    pub s_min: f64,
    pub sparsity: SparsitySpec,
    #[serde(default = "yes")]
    pub pre_norm: bool,
    #[serde(default = "yes")]
    pub post_norm: bool,
    #[serde(default = "yes")]
    pub sigmoid: bool,
    #[serde(default)]
    pub client_wise: bool,
    #[serde(default)]
    pub identity_gating_debug: bool,
}

impl GatingConfig {
    pub fn options(&self) -> GatingOptions {
        GatingOptions {
            pre_norm: self.pre_norm,
            post_norm: self.post_norm,
            sigmoid: self.sigmoid,
            client_wise: self.client_wise,
            identity_gating_debug: self.identity_gating_debug,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub method: Method,
    pub rounds: usize,
    #[serde(default = "one")]
    pub local_epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub lr_model: f64,
    pub lr_gate: f64,
    #[serde(default = "default_clip_norm")]
    pub clip_norm: Option<f64>,
    #[serde(default = "default_fraction")]
    pub sample_fraction: f64,
    #[serde(default = "one")]
    pub finetune_epochs: usize,
    /// Run client updates on the rayon pool; results do not depend on it.
    #[serde(default = "yes")]
    pub parallel: bool,
}

impl TrainingConfig {
    pub fn settings(&self) -> TrainSettings {
        TrainSettings {
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            lr_model: self.lr_model,
            lr_gate: self.lr_gate,
            clip_norm: self.clip_norm,
            finetune_epochs: self.finetune_epochs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_output_dir")]
    pub dir: PathBuf,
    /// Save a checkpoint every this many rounds; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: default_output_dir(),
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NovelConfig {
    /// Fraction of clients kept out of training and adapted afterwards.
    #[serde(default)]
    pub holdout_fraction: f64,
    #[serde(default = "default_adapt_epochs")]
    pub adapt_epochs: usize,
}

impl Default for NovelConfig {
    fn default() -> Self {
        Self {
            holdout_fraction: 0.0,
            adapt_epochs: default_adapt_epochs(),
        }
    }
}

fn yes() -> bool {
    true
}
fn one() -> usize {
    1
}
fn default_min_client_samples() -> usize {
    5
}
fn default_block_factor() -> usize {
    5
}
fn default_s_min() -> f64 {
    0.1
}
fn default_batch_size() -> usize {
    32
}
fn default_clip_norm() -> Option<f64> {
    Some(10.0)
}
fn default_fraction() -> f64 {
    1.0
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/latest")
}
fn default_adapt_epochs() -> usize {
    20
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be a positive number, got {v}")))
    }
}

fn unit_interval(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(Error::config(field, format!("must lie in (0, 1], got {v}")))
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_json(&text)?;
        // a relative CSV path is taken relative to the config file
        if let DataSource::Csv { path: csv } = &mut cfg.data.source {
            if csv.is_relative() {
                if let Some(parent) = path.parent() {
                    *csv = parent.join(&*csv);
                }
            }
        }
        Ok(cfg)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// Field-level checks that need no data.
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.n_clients == 0 {
            return Err(Error::config("data.n_clients", "client list is empty"));
        }
        match &d.source {
            DataSource::Synthetic(s) => {
                if s.n_classes < 2 {
                    return Err(Error::config("data.source.synthetic.n_classes", "must be >= 2"));
                }
                if s.feature_dim == 0 {
                    return Err(Error::config("data.source.synthetic.feature_dim", "must be >= 1"));
                }
                if !(s.noise_std >= 0.0 && s.noise_std.is_finite()) {
                    return Err(Error::config("data.source.synthetic.noise_std", "must be >= 0"));
                }
                if !(s.rotation_strength >= 0.0 && s.rotation_strength.is_finite()) {
                    return Err(Error::config("data.source.synthetic.rotation_strength", "must be >= 0"));
                }
                if s.samples_per_client == 0 {
                    return Err(Error::config(
                        "data.source.synthetic.samples_per_client",
                        "must be >= 1",
                    ));
                }
            }
            DataSource::Csv { path } => {
                if path.as_os_str().is_empty() {
                    return Err(Error::config("data.source.csv.path", "is empty"));
                }
            }
        }
        match d.partition {
            PartitionScheme::Dirichlet { alpha } => positive("data.partition.dirichlet.alpha", alpha)?,
            PartitionScheme::Pathological { shards_per_client } => {
                if shards_per_client == 0 {
                    return Err(Error::config(
                        "data.partition.pathological.shards_per_client",
                        "must be >= 1",
                    ));
                }
            }
        }
        if self.model.hidden_widths.is_empty() || self.model.hidden_widths.contains(&0) {
            return Err(Error::config(
                "model.hidden_widths",
                "needs at least one layer, all widths >= 1",
            ));
        }

        let g = &self.gating;
        if g.block_factor < 2 {
            return Err(Error::config("gating.block_factor", "must be >= 2"));
        }
        unit_interval("gating.s_min", g.s_min)?;
        match &g.sparsity {
            SparsitySpec::Global(s) => unit_interval("gating.sparsity.global", *s)?,
            SparsitySpec::PerClient(list) => {
                if list.len() != d.n_clients {
                    return Err(Error::config(
                        "gating.sparsity.per_client",
                        format!("{} budgets for {} clients", list.len(), d.n_clients),
                    ));
                }
                for s in list {
                    unit_interval("gating.sparsity.per_client", *s)?;
                }
            }
            SparsitySpec::Mixed(list) => {
                if list.is_empty() {
                    return Err(Error::config("gating.sparsity.mixed", "needs at least one budget"));
                }
                for s in list {
                    unit_interval("gating.sparsity.mixed", *s)?;
                }
            }
        }

        let t = &self.training;
        positive("training.lr_model", t.lr_model)?;
        positive("training.lr_gate", t.lr_gate)?;
        if let Some(c) = t.clip_norm {
            positive("training.clip_norm", c)?;
        }
        if t.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be >= 1"));
        }
        unit_interval("training.sample_fraction", t.sample_fraction)?;

        let h = self.novel.holdout_fraction;
        if !(0.0..1.0).contains(&h) {
            return Err(Error::config(
                "novel.holdout_fraction",
                format!("must lie in [0, 1), got {h}"),
            ));
        }
        if d.n_clients - self.n_novel() == 0 {
            return Err(Error::config(
                "novel.holdout_fraction",
                "leaves no participating clients",
            ));
        }
        Ok(())
    }

    /// Checks that every budget holds the mandatory blocks of `partition`.
    pub fn validate_budgets(&self, partition: &BlockPartition) -> Result<()> {
        if self.training.method != Method::PFedGate || self.gating.identity_gating_debug {
            return Ok(());
        }
        let min_feasible = partition.min_feasible_sparsity();
        for s in self.budgets() {
            if s < min_feasible {
                return Err(Error::Infeasible {
                    requested: s,
                    min_feasible,
                });
            }
        }
        Ok(())
    }

    /// Number of held-out novel clients, `round(holdout_fraction · n_clients)`.
    pub fn n_novel(&self) -> usize {
        (self.novel.holdout_fraction * self.data.n_clients as f64).round() as usize
    }

    /// Budget for each client id.
    pub fn budgets(&self) -> Vec<f64> {
        let n = self.data.n_clients;
        match &self.gating.sparsity {
            SparsitySpec::Global(s) => vec![*s; n],
            SparsitySpec::PerClient(list) => list.clone(),
            SparsitySpec::Mixed(list) => {
                let mut ids: Vec<usize> = (0..n).collect();
                ids.shuffle(&mut stream(self.data.seed, Purpose::Budgets, 0, 0));
                let mut out = vec![0.0; n];
                for (pos, id) in ids.into_iter().enumerate() {
                    out[id] = list[pos * list.len() / n];
                }
                out
            }
        }
    }

    pub fn model_spec(&self, input_dim: usize, n_classes: usize) -> Result<ModelSpec> {
        let mut widths = vec![input_dim];
        widths.extend(&self.model.hidden_widths);
        widths.push(n_classes);
        ModelSpec::new(widths, self.model.bias)
    }
}
