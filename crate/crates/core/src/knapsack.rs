//! Block selection under a parameter budget: maximize `Σ I·g` subject to
//! `Σ I·W ≤ budget`, with mandatory blocks always selected.

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct KnapsackInstance {
    pub values: Vec<f64>,
    pub weights: Vec<usize>,
    pub budget: usize,
    pub mandatory: Vec<bool>,
}

impl KnapsackInstance {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mandatory_weight(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.mandatory)
            .filter(|(_, m)| **m)
            .map(|(w, _)| w)
            .sum()
    }

    pub fn total_weight(&self) -> usize {
        self.weights.iter().sum()
    }

    pub fn weight_of(&self, selection: &[bool]) -> usize {
        self.weights
            .iter()
            .zip(selection)
            .filter(|(_, s)| **s)
            .map(|(w, _)| w)
            .sum()
    }

    pub fn value_of(&self, selection: &[bool]) -> f64 {
        self.values
            .iter()
            .zip(selection)
            .filter(|(_, s)| **s)
            .map(|(v, _)| v)
            .sum()
    }

    fn validate(&self) -> Result<()> {
        let l = self.values.len();
        if self.weights.len() != l || self.mandatory.len() != l {
            return Err(Error::dim(
                "knapsack",
                format!(
                    "{} values, {} weights, {} mandatory flags",
                    l,
                    self.weights.len(),
                    self.mandatory.len()
                ),
            ));
        }
        if self.weights.contains(&0) {
            return Err(Error::Domain("knapsack weights must be >= 1".into()));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("knapsack values must be finite".into()));
        }
        let need = self.mandatory_weight();
        if need > self.budget {
            let total = self.total_weight().max(1) as f64;
            return Err(Error::Infeasible {
                requested: self.budget as f64 / total,
                min_feasible: need as f64 / total,
            });
        }
        Ok(())
    }
}

/// Mandatory blocks first, then the rest by descending `g / W` (ties by
/// ascending index), skipping whatever no longer fits. Items with
/// non-positive value are never added, since they cannot raise the objective.
pub fn solve_greedy(inst: &KnapsackInstance) -> Result<Vec<bool>> {
    inst.validate()?;
    let mut selection = inst.mandatory.clone();
    let mut used = inst.mandatory_weight();
    if inst.total_weight() <= inst.budget {
        return Ok(selection
            .iter()
            .zip(&inst.values)
            .map(|(&m, &v)| m || v > 0.0)
            .collect());
    }

    let mut order: Vec<usize> = (0..inst.len()).filter(|&l| !inst.mandatory[l]).collect();
    order.sort_by(|&a, &b| {
        let da = inst.values[a] / inst.weights[a] as f64;
        let db = inst.values[b] / inst.weights[b] as f64;
        db.total_cmp(&da).then(a.cmp(&b))
    });
    for l in order {
        if inst.values[l] <= 0.0 {
            break;
        }
        if used + inst.weights[l] <= inst.budget {
            selection[l] = true;
            used += inst.weights[l];
        }
    }
    Ok(selection)
}

/// Exact dynamic program over capacities. Among optimal selections it
/// returns the lexicographically smallest bit string (`false < true`,
/// block 0 most significant). Intended as a test-scale oracle: the table has
/// `(L + 1) × (budget + 1)` cells.
pub fn solve_dp(inst: &KnapsackInstance) -> Result<Vec<bool>> {
    inst.validate()?;
    let l = inst.len();
    let cap = inst.budget - inst.mandatory_weight();
    let width = cap + 1;

    // best[i][c]: best value from optional items i.. with capacity c
    let mut best = vec![0.0f64; (l + 1) * width];
    for i in (0..l).rev() {
        for c in 0..width {
            let skip = best[(i + 1) * width + c];
            let take = if !inst.mandatory[i] && inst.weights[i] <= c {
                inst.values[i] + best[(i + 1) * width + c - inst.weights[i]]
            } else {
                f64::NEG_INFINITY
            };
            best[i * width + c] = skip.max(take);
        }
    }

    let mut selection = inst.mandatory.clone();
    let mut c = cap;
    for i in 0..l {
        if inst.mandatory[i] {
            continue;
        }
        // prefer leaving the item out whenever that stays optimal
        if best[(i + 1) * width + c] >= best[i * width + c] {
            continue;
        }
        selection[i] = true;
        c -= inst.weights[i];
    }
    Ok(selection)
}
