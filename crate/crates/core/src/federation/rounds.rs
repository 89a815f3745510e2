//! The round loop shared by pFedGate and the baselines.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::client::{ClientState, Engine, Evaluation, LocalOutcome};
use super::{aggregate, q_ratio, sample_clients, ServerState, SparseUpdate};
use crate::error::{Error, Result};
use crate::metrics::{bottom_decile_acc, comm_volume, weighted_avg_acc, RoundRecord};
use crate::model::ParamVector;
use crate::seed::{stream, Purpose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "pfedgate")]
    PFedGate,
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedavg_ft")]
    FedAvgFt,
    #[serde(rename = "local")]
    Local,
}

impl Method {
    /// The spelling used in config files.
    pub fn name(self) -> &'static str {
        match self {
            Method::PFedGate => "pfedgate",
            Method::FedAvg => "fedavg",
            Method::FedAvgFt => "fedavg_ft",
            Method::Local => "local",
        }
    }
}

/// Accuracy summary over a set of clients.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Scores {
    pub avg_acc: f64,
    pub bottom_decile_acc: f64,
    pub val_acc: f64,
    pub achieved_sparsity: f64,
    /// Largest per-batch sparsity over every client's test and validation batches.
    pub max_eval_sparsity: f64,
    pub per_client_acc: Vec<f64>,
}

/// Outcome of adapting held-out clients to the final global model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NovelReport {
    /// Weighted test accuracy of the participating clients.
    pub participant_acc: f64,
    /// Weighted test accuracy of the novel clients after adaptation.
    pub novel_acc: f64,
    /// `participant_acc − novel_acc`.
    pub gap: f64,
    pub per_client_acc: Vec<f64>,
}

pub struct Federation {
    pub engine: Engine,
    pub server: ServerState,
    /// Participating clients in ascending id order.
    pub clients: Vec<ClientState>,
    pub method: Method,
    pub sample_fraction: f64,
    pub seed: u64,
    pub parallel: bool,
}

impl Federation {
    pub fn new(
        engine: Engine,
        server: ServerState,
        mut clients: Vec<ClientState>,
        method: Method,
        sample_fraction: f64,
        seed: u64,
        parallel: bool,
    ) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::config("data.n_clients", "no participating clients"));
        }
        clients.sort_by_key(|c| c.id);
        if clients.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(Error::config("data.n_clients", "duplicate client id"));
        }
        if method == Method::PFedGate && !engine.gating.identity_gating_debug {
            let min_feasible = server.partition.min_feasible_sparsity();
            if let Some(c) = clients.iter().find(|c| c.sparsity < min_feasible) {
                return Err(Error::Infeasible {
                    requested: c.sparsity,
                    min_feasible,
                });
            }
        }
        if method == Method::Local {
            for c in &mut clients {
                c.theta.get_or_insert_with(|| server.theta.clone());
            }
        }
        Ok(Self {
            engine,
            server,
            clients,
            method,
            sample_fraction,
            seed,
            parallel,
        })
    }

    pub fn round(&self) -> usize {
        self.server.round
    }

    fn map_clients<T, F>(&self, positions: &[usize], f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(&ClientState) -> Result<T> + Sync + Send,
    {
        if self.parallel {
            positions.par_iter().map(|&p| f(&self.clients[p])).collect()
        } else {
            positions.iter().map(|&p| f(&self.clients[p])).collect()
        }
    }

    fn train_client(&self, c: &ClientState, t: usize) -> Result<LocalOutcome> {
        let mut rng = stream(self.seed, Purpose::Local, t as u64, c.id as u64);
        let engine = &self.engine;
        let epochs = engine.settings.local_epochs;
        match self.method {
            Method::PFedGate => engine.local_update(c, &self.server.theta, t, &mut rng),
            Method::FedAvg | Method::FedAvgFt => {
                let mut theta = self.server.theta.clone();
                let stats = engine.train_dense(&mut theta, &c.data.train, epochs, &mut rng)?;
                let before = self.server.theta.as_slice();
                let update = if epochs == 0 {
                    SparseUpdate::empty(c.id, t)
                } else {
                    SparseUpdate::dense(c.id, t, &self.server.partition, before, theta.as_slice())
                };
                Ok(LocalOutcome {
                    update,
                    phi: c.phi.clone(),
                    theta,
                    stats,
                })
            }
            Method::Local => {
                let mut theta = c.theta.clone().expect("local baseline keeps a private model");
                let stats = engine.train_dense(&mut theta, &c.data.train, epochs, &mut rng)?;
                Ok(LocalOutcome {
                    update: SparseUpdate::empty(c.id, t),
                    phi: c.phi.clone(),
                    theta,
                    stats,
                })
            }
        }
    }

    /// Test and validation evaluation of one participating client.
    fn evaluate_client(&self, c: &ClientState, t: usize) -> Result<(Evaluation, Evaluation)> {
        let engine = &self.engine;
        let theta = &self.server.theta;
        match self.method {
            Method::PFedGate => Ok((
                engine.evaluate_gated(theta, c, &c.phi, &c.data.test)?,
                engine.evaluate_gated(theta, c, &c.phi, &c.data.val)?,
            )),
            Method::FedAvg => Ok((
                engine.evaluate_dense(theta, &c.data.test)?,
                engine.evaluate_dense(theta, &c.data.val)?,
            )),
            Method::FedAvgFt => {
                let mut tuned = theta.clone();
                let mut rng = stream(self.seed, Purpose::FineTune, t as u64, c.id as u64);
                engine.train_dense(&mut tuned, &c.data.train, engine.settings.finetune_epochs, &mut rng)?;
                Ok((
                    engine.evaluate_dense(&tuned, &c.data.test)?,
                    engine.evaluate_dense(&tuned, &c.data.val)?,
                ))
            }
            Method::Local => {
                let own = c.theta.as_ref().expect("local baseline keeps a private model");
                Ok((
                    engine.evaluate_dense(own, &c.data.test)?,
                    engine.evaluate_dense(own, &c.data.val)?,
                ))
            }
        }
    }

    /// Scores every participating client against the current state.
    pub fn evaluate(&self) -> Result<Scores> {
        let positions: Vec<usize> = (0..self.clients.len()).collect();
        let t = self.server.round;
        let evals = self.map_clients(&positions, |c| self.evaluate_client(c, t))?;
        let acc: Vec<f64> = evals.iter().map(|(test, _)| test.accuracy()).collect();
        let test_sizes: Vec<usize> = evals.iter().map(|(test, _)| test.total).collect();
        let val_acc: Vec<f64> = evals.iter().map(|(_, val)| val.accuracy()).collect();
        let val_sizes: Vec<usize> = evals.iter().map(|(_, val)| val.total).collect();
        let val = if val_sizes.iter().sum::<usize>() == 0 {
            0.0
        } else {
            weighted_avg_acc(&val_acc, &val_sizes)?
        };
        Ok(Scores {
            avg_acc: weighted_avg_acc(&acc, &test_sizes)?,
            bottom_decile_acc: bottom_decile_acc(&acc)?,
            val_acc: val,
            achieved_sparsity: evals.iter().map(|(test, _)| test.mean_sparsity).sum::<f64>() / evals.len() as f64,
            max_eval_sparsity: evals
                .iter()
                .map(|(test, val)| test.max_sparsity.max(val.max_sparsity))
                .fold(0.0, f64::max),
            per_client_acc: acc,
        })
    }

    /// One round: sample → local updates against the same snapshot →
    /// aggregate in ascending client id → evaluate.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let t = self.server.round + 1;
        let ids: Vec<usize> = self.clients.iter().map(|c| c.id).collect();
        let mut rng = stream(self.seed, Purpose::Sampling, t as u64, 0);
        let sampled = sample_clients(&ids, self.sample_fraction, &mut rng)?;
        let positions: Vec<usize> = sampled
            .iter()
            .map(|id| ids.binary_search(id).expect("sampled id exists"))
            .collect();

        let outcomes = self.map_clients(&positions, |c| self.train_client(c, t))?;

        let d = self.engine.spec.n_params();
        let n = outcomes.len() as f64;
        let mean_q = outcomes.iter().map(|o| q_ratio(&o.update, d)).sum::<f64>() / n;
        let train_loss = outcomes.iter().map(|o| o.stats.mean_loss).sum::<f64>() / n;
        let max_batch_sparsity = outcomes.iter().map(|o| o.stats.max_batch_sparsity).fold(0.0, f64::max);
        let weights: Vec<f64> = positions.iter().map(|&p| self.clients[p].weight()).collect();

        let mut updates = Vec::with_capacity(outcomes.len());
        for (&pos, out) in positions.iter().zip(outcomes) {
            match self.method {
                Method::PFedGate => self.clients[pos].phi = out.phi,
                Method::Local => self.clients[pos].theta = Some(out.theta),
                Method::FedAvg | Method::FedAvgFt => {}
            }
            updates.push(out.update);
        }
        let volume = comm_volume(&updates);
        if self.method != Method::Local {
            aggregate(&mut self.server, &updates, &weights)?;
        }
        self.server.round = t;

        let scores = self.evaluate()?;
        Ok(RoundRecord {
            round: t,
            avg_acc: scores.avg_acc,
            bottom_decile_acc: scores.bottom_decile_acc,
            val_acc: scores.val_acc,
            achieved_sparsity: scores.achieved_sparsity,
            mean_q,
            upload_floats: volume.payload_floats,
            index_overhead: volume.index_overhead,
            train_loss,
            max_batch_sparsity: max_batch_sparsity.max(scores.max_eval_sparsity),
            n_sampled: sampled.len(),
        })
    }

    pub fn run(&mut self, rounds: usize) -> Result<Vec<RoundRecord>> {
        (0..rounds).map(|_| self.run_round()).collect()
    }

    /// Adapts clients that never took part in training to the frozen global
    /// model. For pFedGate only the gating layer is trained; `θ_g` is only
    /// read.
    pub fn adapt_novel(&self, novel: &[ClientState], epochs: usize) -> Result<NovelReport> {
        if novel.is_empty() {
            return Err(Error::config("novel.holdout_fraction", "no held-out clients"));
        }
        let engine = &self.engine;
        let theta = &self.server.theta;
        let evals: Vec<Evaluation> = novel
            .par_iter()
            .map(|c| {
                let mut rng = stream(self.seed, Purpose::NovelAdapt, 0, c.id as u64);
                match self.method {
                    Method::PFedGate => {
                        let (phi, _) = engine.adapt_gating(c, theta, epochs, &mut rng)?;
                        engine.evaluate_gated(theta, c, &phi, &c.data.test)
                    }
                    Method::FedAvg => engine.evaluate_dense(theta, &c.data.test),
                    Method::FedAvgFt | Method::Local => {
                        let mut tuned = theta.clone();
                        engine.train_dense(&mut tuned, &c.data.train, epochs, &mut rng)?;
                        engine.evaluate_dense(&tuned, &c.data.test)
                    }
                }
            })
            .collect::<Result<_>>()?;
        let acc: Vec<f64> = evals.iter().map(Evaluation::accuracy).collect();
        let sizes: Vec<usize> = evals.iter().map(|e| e.total).collect();
        let novel_acc = weighted_avg_acc(&acc, &sizes)?;
        let participant_acc = self.evaluate()?.avg_acc;
        Ok(NovelReport {
            participant_acc,
            novel_acc,
            gap: participant_acc - novel_acc,
            per_client_acc: acc,
        })
    }

    pub fn theta(&self) -> &ParamVector {
        &self.server.theta
    }
}
