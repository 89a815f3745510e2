//! The federated protocol: sparse index-keyed updates, per-block
//! renormalized aggregation, client sampling, and the round loop.

mod client;
mod rounds;

use std::collections::BTreeMap;

use rand::Rng;
use serde::Serialize;

use crate::blocks::BlockPartition;
use crate::error::{Error, Result};
use crate::model::ParamVector;

pub use client::{ClientData, ClientState, Engine, Evaluation, LocalOutcome, LocalStats, TrainSettings};
pub use rounds::{Federation, Method, NovelReport, Scores};

/// What one client uploads: `block id → delta` for every block whose delta
/// is not identically zero.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SparseUpdate {
    pub sender: usize,
    pub round: usize,
    pub blocks: BTreeMap<usize, Vec<f64>>,
}

impl SparseUpdate {
    pub fn empty(sender: usize, round: usize) -> Self {
        Self {
            sender,
            round,
            blocks: BTreeMap::new(),
        }
    }

    /// Keeps the blocks of `after − before` that contain a non-zero entry.
    pub fn from_delta(sender: usize, round: usize, partition: &BlockPartition, before: &[f64], after: &[f64]) -> Self {
        let mut update = Self::empty(sender, round);
        for (l, range) in partition.ranges().iter().enumerate() {
            let delta: Vec<f64> = after[range.clone()]
                .iter()
                .zip(&before[range.clone()])
                .map(|(a, b)| a - b)
                .collect();
            if delta.iter().any(|v| *v != 0.0) {
                update.blocks.insert(l, delta);
            }
        }
        update
    }

    /// Every block, as plain FedAvg would send it.
    pub fn dense(sender: usize, round: usize, partition: &BlockPartition, before: &[f64], after: &[f64]) -> Self {
        let mut update = Self::empty(sender, round);
        for (l, range) in partition.ranges().iter().enumerate() {
            let delta = after[range.clone()]
                .iter()
                .zip(&before[range.clone()])
                .map(|(a, b)| a - b)
                .collect();
            update.blocks.insert(l, delta);
        }
        update
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Floats carried in the payloads.
    pub fn payload_floats(&self) -> usize {
        self.blocks.values().map(Vec::len).sum()
    }

    /// Block indices sent alongside the payloads.
    pub fn index_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn nonzero_count(&self) -> usize {
        self.blocks.values().flatten().filter(|v| **v != 0.0).count()
    }
}

/// Fraction of the `d` global parameters whose delta is non-zero.
pub fn q_ratio(update: &SparseUpdate, d: usize) -> f64 {
    if d == 0 {
        return 0.0;
    }
    update.nonzero_count() as f64 / d as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServerState {
    pub theta: ParamVector,
    pub partition: BlockPartition,
    pub round: usize,
}

impl ServerState {
    pub fn new(theta: ParamVector, partition: BlockPartition) -> Result<Self> {
        if theta.len() != partition.n_params() {
            return Err(Error::dim(
                "server",
                format!("{} parameters for a partition of {}", theta.len(), partition.n_params()),
            ));
        }
        Ok(Self {
            theta,
            partition,
            round: 0,
        })
    }
}

/// Index-keyed aggregation. Each block moves by the weighted mean of the
/// deltas received for it, with weights renormalized over the clients that
/// actually sent that block; untouched blocks are left bit-identical.
/// Contributions are summed in ascending sender order, so the result does
/// not depend on the order of `updates`.
pub fn aggregate(server: &mut ServerState, updates: &[SparseUpdate], weights: &[f64]) -> Result<()> {
    if updates.len() != weights.len() {
        return Err(Error::Protocol(format!(
            "{} updates but {} aggregation weights",
            updates.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Protocol(
            "aggregation weights must be finite and non-negative".into(),
        ));
    }
    let partition = &server.partition;
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].sender);
    if order.windows(2).any(|w| updates[w[0]].sender == updates[w[1]].sender) {
        return Err(Error::Protocol("duplicate sender in one round".into()));
    }
    for u in updates {
        for (&l, payload) in &u.blocks {
            if l >= partition.n_blocks() {
                return Err(Error::Protocol(format!("client {} sent unknown block {l}", u.sender)));
            }
            let expected = partition.range(l).len();
            if payload.len() != expected {
                return Err(Error::Protocol(format!(
                    "client {} sent {} values for block {l} of size {expected}",
                    u.sender,
                    payload.len()
                )));
            }
        }
    }

    for l in 0..partition.n_blocks() {
        let contributors: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&i| updates[i].blocks.contains_key(&l))
            .collect();
        if contributors.is_empty() {
            continue;
        }
        let total: f64 = contributors.iter().map(|&i| weights[i]).sum();
        if total <= 0.0 {
            return Err(Error::Protocol(format!("block {l} has zero total weight")));
        }
        let range = partition.range(l);
        let mut acc = vec![0.0; range.len()];
        for &i in &contributors {
            let w = weights[i] / total;
            for (a, d) in acc.iter_mut().zip(&updates[i].blocks[&l]) {
                *a += w * d;
            }
        }
        for (t, a) in server.theta.as_mut_slice()[range].iter_mut().zip(acc) {
            *t += a;
        }
    }
    Ok(())
}

/// `⌈fraction · |ids|⌉` distinct ids drawn uniformly without replacement,
/// returned in ascending order.
pub fn sample_clients<R: Rng + ?Sized>(ids: &[usize], fraction: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("training.sample_fraction", "must lie in (0, 1]"));
    }
    if ids.is_empty() {
        return Err(Error::config("data.n_clients", "no clients to sample from"));
    }
    // guard against products like 0.1 * 30 = 3.0000000000000004
    let k = ((fraction * ids.len() as f64 - 1e-9).ceil() as usize).clamp(1, ids.len());
    if k == ids.len() {
        let mut all = ids.to_vec();
        all.sort_unstable();
        return Ok(all);
    }
    let mut chosen: Vec<usize> = rand::seq::index::sample(rng, ids.len(), k)
        .into_iter()
        .map(|i| ids[i])
        .collect();
    chosen.sort_unstable();
    Ok(chosen)
}
