//! Operator-type-free block splitting of the flat parameter vector.
//!
//! Each operator of length `d_l` is cut into a mandatory leading block of
//! `⌊d_l · s_min⌋` entries (at least one) followed by up to `B − 1` blocks of
//! `⌈rest / (B − 1)⌉` entries, the last one possibly shorter. Operators with
//! fewer than `B` entries get one block per entry instead.

use std::ops::Range;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ModelSpec, ParamVector};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockPartition {
    ranges: Vec<Range<usize>>,
    /// Owning operator index per block.
    operator: Vec<usize>,
    mandatory: Vec<bool>,
    split_factor: usize,
    s_min: f64,
    n_params: usize,
}

/// Block sizes for one operator of length `d_l`.
pub fn split_sizes(d_l: usize, split_factor: usize, s_min: f64) -> Vec<usize> {
    if d_l == 0 {
        return vec![];
    }
    if d_l < split_factor {
        return vec![1; d_l];
    }
    let first = ((d_l as f64 * s_min).floor() as usize).clamp(1, d_l);
    let mut sizes = vec![first];
    let rest = d_l - first;
    if rest > 0 {
        let chunk = rest.div_ceil(split_factor - 1);
        let mut left = rest;
        while left > 0 {
            let take = chunk.min(left);
            sizes.push(take);
            left -= take;
        }
    }
    sizes
}

impl BlockPartition {
    pub fn split(spec: &ModelSpec, split_factor: usize, s_min: f64) -> Result<Self> {
        if split_factor < 2 {
            return Err(Error::config("gating.block_factor", "must be >= 2"));
        }
        if !(s_min > 0.0 && s_min <= 1.0) {
            return Err(Error::config("gating.s_min", "must lie in (0, 1]"));
        }
        let mut ranges = Vec::new();
        let mut operator = Vec::new();
        let mut mandatory = Vec::new();
        for (op_idx, op) in spec.operators().iter().enumerate() {
            let mut start = op.offset;
            for (k, size) in split_sizes(op.len(), split_factor, s_min).into_iter().enumerate() {
                ranges.push(start..start + size);
                operator.push(op_idx);
                mandatory.push(k == 0);
                start += size;
            }
            debug_assert_eq!(start, op.range().end);
        }
        Ok(Self {
            ranges,
            operator,
            mandatory,
            split_factor,
            s_min,
            n_params: spec.n_params(),
        })
    }

    /// Number of blocks `L`.
    pub fn n_blocks(&self) -> usize {
        self.ranges.len()
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn range(&self, block: usize) -> Range<usize> {
        self.ranges[block].clone()
    }

    /// Parameter count per block (the `W` table).
    pub fn sizes(&self) -> Vec<usize> {
        self.ranges.iter().map(|r| r.len()).collect()
    }

    pub fn mandatory(&self) -> &[bool] {
        &self.mandatory
    }

    pub fn operator_of(&self, block: usize) -> usize {
        self.operator[block]
    }

    pub fn split_factor(&self) -> usize {
        self.split_factor
    }

    pub fn s_min(&self) -> f64 {
        self.s_min
    }

    /// Block containing flat parameter index `j`.
    pub fn block_of(&self, j: usize) -> Option<usize> {
        if j >= self.n_params {
            return None;
        }
        Some(self.ranges.partition_point(|r| r.end <= j))
    }

    pub fn mandatory_params(&self) -> usize {
        self.ranges
            .iter()
            .zip(&self.mandatory)
            .filter(|(_, m)| **m)
            .map(|(r, _)| r.len())
            .sum()
    }

    /// Smallest sparsity budget that still holds every mandatory block.
    pub fn min_feasible_sparsity(&self) -> f64 {
        self.mandatory_params() as f64 / self.n_params as f64
    }

    /// Largest parameter count `c` with `c / d <= s`.
    pub fn budget(&self, s: f64) -> usize {
        let d = self.n_params as f64;
        let mut c = (s * d).floor().max(0.0) as usize;
        while c < self.n_params && ((c + 1) as f64) / d <= s {
            c += 1;
        }
        while c > 0 && (c as f64) / d > s {
            c -= 1;
        }
        c
    }
}

/// Multiplies every parameter of block `l` by `m_prime[l]`.
pub fn apply_gates(theta: &ParamVector, partition: &BlockPartition, m_prime: &[f64]) -> Result<ParamVector> {
    if m_prime.len() != partition.n_blocks() {
        return Err(Error::dim(
            "apply_gates",
            format!("{} gates for {} blocks", m_prime.len(), partition.n_blocks()),
        ));
    }
    if theta.len() != partition.n_params() {
        return Err(Error::dim(
            "apply_gates",
            format!("{} parameters for a partition of {}", theta.len(), partition.n_params()),
        ));
    }
    let mut out = theta.clone();
    for (range, &scale) in partition.ranges().iter().zip(m_prime) {
        for v in &mut out.as_mut_slice()[range.clone()] {
            *v *= scale;
        }
    }
    Ok(out)
}

/// Fraction of non-zero entries: `count(θ′ ≠ 0) / d`.
pub fn achieved_sparsity(theta_prime: &[f64], d: usize) -> f64 {
    if d == 0 {
        return 0.0;
    }
    theta_prime.iter().filter(|v| **v != 0.0).count() as f64 / d as f64
}
