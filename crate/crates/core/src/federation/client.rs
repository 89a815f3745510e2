//! Client-side work: gated local training, dense SGD for the baselines,
//! gating-only adaptation, and evaluation.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SparseUpdate;
use crate::autodiff::{clip_global_norm, Tape, Tensor};
use crate::blocks::{achieved_sparsity, BlockPartition};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gating::{gated_forward, GateDecision, GatingLayer, GatingOptions, Selection};
use crate::model::{argmax_rows, ModelSpec, ParamVector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Step size for the shared model (`η_g`).
    pub lr_model: f64,
    /// Step size for the gating layer (`η`).
    pub lr_gate: f64,
    /// Global-norm clip applied separately to the model and gating gradients.
    pub clip_norm: Option<f64>,
    /// Local epochs run before evaluation by FedAvg-FT.
    pub finetune_epochs: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            local_epochs: 1,
            batch_size: 32,
            lr_model: 0.05,
            lr_gate: 0.05,
            clip_norm: Some(10.0),
            finetune_epochs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub data: ClientData,
    pub phi: GatingLayer,
    /// Sparsity budget `s_i`.
    pub sparsity: f64,
    /// Private model, used only by the local-training baseline.
    pub theta: Option<ParamVector>,
}

impl ClientState {
    /// Aggregation weight, proportional to the local training-set size.
    pub fn weight(&self) -> f64 {
        self.data.train.len() as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LocalStats {
    pub n_batches: usize,
    pub mean_loss: f64,
    /// Largest `count(θ′ ≠ 0) / d` over the training batches.
    pub max_batch_sparsity: f64,
    /// One entry per gated training batch.
    pub decisions: Vec<GateDecision>,
}

#[derive(Clone, Debug)]
pub struct LocalOutcome {
    pub update: SparseUpdate,
    pub phi: GatingLayer,
    pub theta: ParamVector,
    pub stats: LocalStats,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Evaluation {
    pub correct: usize,
    pub total: usize,
    pub mean_loss: f64,
    /// Mean over evaluation batches of `count(θ′ ≠ 0) / d`.
    pub mean_sparsity: f64,
    /// Largest per-batch `count(θ′ ≠ 0) / d`.
    pub max_sparsity: f64,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Everything a client needs besides its own state: the model layout, the
/// block partition, the gating options and the optimizer settings.
#[derive(Clone, Debug)]
pub struct Engine {
    pub spec: ModelSpec,
    pub partition: BlockPartition,
    pub gating: GatingOptions,
    pub settings: TrainSettings,
}

fn clip(grads: &mut [&mut [f64]], max_norm: Option<f64>) {
    if let Some(max_norm) = max_norm {
        clip_global_norm(grads, max_norm);
    }
}

fn sgd(params: &mut [f64], grad: &[f64], lr: f64) {
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= lr * g;
    }
}

impl Engine {
    fn shuffled_batches<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        order
            .chunks(self.settings.batch_size.max(1))
            .map(<[usize]>::to_vec)
            .collect()
    }

    fn ordered_batches(&self, n: usize) -> Vec<Vec<usize>> {
        let order: Vec<usize> = (0..n).collect();
        order
            .chunks(self.settings.batch_size.max(1))
            .map(<[usize]>::to_vec)
            .collect()
    }

    fn gate_pool(&self, client: &ClientState) -> Option<Tensor> {
        self.gating.client_wise.then(|| client.data.train.mean_features())
    }

    /// One pFedGate round on one client: per batch gate → select →
    /// straight-through → adapt → loss → backward, then SGD on a working
    /// copy of `θ_g` and on `φ`. Uploads the non-zero blocks of the
    /// cumulative model delta.
    pub fn local_update<R: Rng + ?Sized>(
        &self,
        client: &ClientState,
        theta_g: &ParamVector,
        round: usize,
        rng: &mut R,
    ) -> Result<LocalOutcome> {
        if client.data.train.is_empty() {
            return Err(Error::EmptyBatch("local_update"));
        }
        let mut theta = theta_g.clone();
        let mut phi = client.phi.clone();
        let train_phi = !self.gating.identity_gating_debug;
        let stats = self.train_gated(
            client,
            &mut theta,
            &mut phi,
            self.settings.local_epochs,
            true,
            train_phi,
            rng,
        )?;
        let update = SparseUpdate::from_delta(client.id, round, &self.partition, theta_g.as_slice(), theta.as_slice());
        Ok(LocalOutcome {
            update,
            phi,
            theta,
            stats,
        })
    }

    /// Trains only the gating layer against a frozen model.
    pub fn adapt_gating<R: Rng + ?Sized>(
        &self,
        client: &ClientState,
        theta_g: &ParamVector,
        epochs: usize,
        rng: &mut R,
    ) -> Result<(GatingLayer, LocalStats)> {
        let mut theta = theta_g.clone();
        let mut phi = client.phi.clone();
        let train_phi = !self.gating.identity_gating_debug;
        let stats = self.train_gated(client, &mut theta, &mut phi, epochs, false, train_phi, rng)?;
        Ok((phi, stats))
    }

    #[allow(clippy::too_many_arguments)]
    fn train_gated<R: Rng + ?Sized>(
        &self,
        client: &ClientState,
        theta: &mut ParamVector,
        phi: &mut GatingLayer,
        epochs: usize,
        train_theta: bool,
        train_phi: bool,
        rng: &mut R,
    ) -> Result<LocalStats> {
        let data = &client.data.train;
        let d = self.spec.n_params();
        let pool = self.gate_pool(client);
        let mut stats = LocalStats::default();
        let mut loss_sum = 0.0;
        for _ in 0..epochs {
            for idx in self.shuffled_batches(data.len(), rng) {
                let (xb, yb) = data.batch(&idx);
                let mut tape = Tape::new();
                let theta_var = tape.leaf(theta.to_tensor());
                let phi_vars = phi.register(&mut tape);
                let x = tape.leaf(xb);
                let gate_input = match &pool {
                    Some(p) => tape.leaf(p.clone()),
                    None => x,
                };
                let out = gated_forward(
                    &mut tape,
                    &self.spec,
                    &self.partition,
                    theta_var,
                    &phi_vars,
                    gate_input,
                    x,
                    &self.gating,
                    Selection::Budget(client.sparsity),
                )?;
                let loss = tape.softmax_cross_entropy(out.logits, &yb)?;
                loss_sum += tape.value(loss).data()[0];
                let sparsity = achieved_sparsity(tape.value(out.theta_prime).data(), d);
                stats.max_batch_sparsity = stats.max_batch_sparsity.max(sparsity);
                stats.decisions.push(out.decision);
                stats.n_batches += 1;

                let grads = tape.backward(loss)?;
                if train_theta {
                    let mut g = grads.get(theta_var).data().to_vec();
                    clip(&mut [&mut g], self.settings.clip_norm);
                    sgd(theta.as_mut_slice(), &g, self.settings.lr_model);
                }
                if train_phi {
                    let mut gs: Vec<Vec<f64>> = phi_vars.0.iter().map(|v| grads.get(*v).data().to_vec()).collect();
                    let mut views: Vec<&mut [f64]> = gs.iter_mut().map(Vec::as_mut_slice).collect();
                    clip(&mut views, self.settings.clip_norm);
                    for (t, g) in phi.tensors_mut().into_iter().zip(&gs) {
                        sgd(t.data_mut(), g, self.settings.lr_gate);
                    }
                }
            }
        }
        if stats.n_batches > 0 {
            stats.mean_loss = loss_sum / stats.n_batches as f64;
        }
        Ok(stats)
    }

    /// Plain minibatch SGD on the dense model (no gating).
    pub fn train_dense<R: Rng + ?Sized>(
        &self,
        theta: &mut ParamVector,
        data: &Dataset,
        epochs: usize,
        rng: &mut R,
    ) -> Result<LocalStats> {
        let d = self.spec.n_params();
        let mut stats = LocalStats::default();
        let mut loss_sum = 0.0;
        for _ in 0..epochs {
            for idx in self.shuffled_batches(data.len(), rng) {
                let (xb, yb) = data.batch(&idx);
                let mut tape = Tape::new();
                let theta_var = tape.leaf(theta.to_tensor());
                let x = tape.leaf(xb);
                let logits = self.spec.forward(&mut tape, theta_var, x)?;
                let loss = tape.softmax_cross_entropy(logits, &yb)?;
                loss_sum += tape.value(loss).data()[0];
                stats.n_batches += 1;
                stats.max_batch_sparsity = stats.max_batch_sparsity.max(achieved_sparsity(theta.as_slice(), d));
                let grads = tape.backward(loss)?;
                let mut g = grads.get(theta_var).data().to_vec();
                clip(&mut [&mut g], self.settings.clip_norm);
                sgd(theta.as_mut_slice(), &g, self.settings.lr_model);
            }
        }
        if stats.n_batches > 0 {
            stats.mean_loss = loss_sum / stats.n_batches as f64;
        }
        Ok(stats)
    }

    /// Top-1 accuracy with per-batch gating, batches taken in order.
    pub fn evaluate_gated(
        &self,
        theta: &ParamVector,
        client: &ClientState,
        phi: &GatingLayer,
        data: &Dataset,
    ) -> Result<Evaluation> {
        let d = self.spec.n_params();
        let pool = self.gate_pool(client);
        let mut eval = Evaluation::default();
        let mut n_batches = 0;
        let mut loss_sum = 0.0;
        let mut sparsity_sum = 0.0;
        for idx in self.ordered_batches(data.len()) {
            let (xb, yb) = data.batch(&idx);
            let mut tape = Tape::new();
            let theta_var = tape.leaf(theta.to_tensor());
            let phi_vars = phi.register(&mut tape);
            let x = tape.leaf(xb);
            let gate_input = match &pool {
                Some(p) => tape.leaf(p.clone()),
                None => x,
            };
            let out = gated_forward(
                &mut tape,
                &self.spec,
                &self.partition,
                theta_var,
                &phi_vars,
                gate_input,
                x,
                &self.gating,
                Selection::Budget(client.sparsity),
            )?;
            let sparsity = achieved_sparsity(tape.value(out.theta_prime).data(), d);
            sparsity_sum += sparsity;
            eval.max_sparsity = eval.max_sparsity.max(sparsity);
            let loss = tape.softmax_cross_entropy(out.logits, &yb)?;
            loss_sum += tape.value(loss).data()[0] * yb.len() as f64;
            let pred = argmax_rows(tape.value(out.logits));
            eval.correct += pred.iter().zip(&yb).filter(|(p, y)| p == y).count();
            eval.total += yb.len();
            n_batches += 1;
        }
        if n_batches > 0 {
            eval.mean_sparsity = sparsity_sum / n_batches as f64;
            eval.mean_loss = loss_sum / eval.total as f64;
        }
        Ok(eval)
    }

    /// Top-1 accuracy of the dense model.
    pub fn evaluate_dense(&self, theta: &ParamVector, data: &Dataset) -> Result<Evaluation> {
        let mut eval = Evaluation::default();
        if data.is_empty() {
            return Ok(eval);
        }
        let all: Vec<usize> = (0..data.len()).collect();
        let (xb, yb) = data.batch(&all);
        let mut tape = Tape::new();
        let theta_var = tape.leaf(theta.to_tensor());
        let x = tape.leaf(xb);
        let logits = self.spec.forward(&mut tape, theta_var, x)?;
        let loss = tape.softmax_cross_entropy(logits, &yb)?;
        let pred = argmax_rows(tape.value(logits));
        eval.correct = pred.iter().zip(&yb).filter(|(p, y)| p == y).count();
        eval.total = yb.len();
        eval.mean_loss = tape.value(loss).data()[0];
        eval.mean_sparsity = achieved_sparsity(theta.as_slice(), self.spec.n_params());
        eval.max_sparsity = eval.mean_sparsity;
        Ok(eval)
    }
}
