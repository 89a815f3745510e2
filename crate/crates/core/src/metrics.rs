//! Per-round measurements and their JSONL serialization.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::SparseUpdate;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundRecord {
    pub round: usize,
    /// Test accuracy averaged over clients, weighted by test-set size.
    pub avg_acc: f64,
    /// `⌊|C|/10⌋`-th worst client test accuracy (the worst when `|C| < 10`).
    pub bottom_decile_acc: f64,
    /// Weighted validation accuracy, used to pick the best round.
    pub val_acc: f64,
    /// Mean achieved sparsity `s̄′` over evaluation batches and clients.
    pub achieved_sparsity: f64,
    /// Mean non-zero update ratio over the sampled clients.
    pub mean_q: f64,
    pub upload_floats: usize,
    /// Block indices uploaded alongside the payloads.
    pub index_overhead: usize,
    pub train_loss: f64,
    /// Largest achieved sparsity of any adapted model on any training or
    /// evaluation batch this round.
    pub max_batch_sparsity: f64,
    pub n_sampled: usize,
}

/// Accuracy averaged with weights proportional to `sizes`.
pub fn weighted_avg_acc(acc: &[f64], sizes: &[usize]) -> Result<f64> {
    if acc.len() != sizes.len() {
        return Err(Error::dim(
            "weighted_avg_acc",
            format!("{} accuracies, {} sizes", acc.len(), sizes.len()),
        ));
    }
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::Domain("weighted_avg_acc needs a non-empty test set".into()));
    }
    Ok(acc.iter().zip(sizes).map(|(a, &n)| a * n as f64).sum::<f64>() / total as f64)
}

/// The `⌊|C|/10⌋`-th worst accuracy; the minimum when there are fewer than 10 clients.
pub fn bottom_decile_acc(acc: &[f64]) -> Result<f64> {
    if acc.is_empty() {
        return Err(Error::Domain("bottom_decile_acc of no clients".into()));
    }
    let mut sorted = acc.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (acc.len() / 10).max(1);
    Ok(sorted[rank - 1])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CommVolume {
    pub payload_floats: usize,
    pub index_overhead: usize,
}

/// Upload cost of a round: payload floats plus the block indices sent with them.
pub fn comm_volume(updates: &[SparseUpdate]) -> CommVolume {
    updates.iter().fold(CommVolume::default(), |acc, u| CommVolume {
        payload_floats: acc.payload_floats + u.payload_floats(),
        index_overhead: acc.index_overhead + u.index_count(),
    })
}

/// Highest validation accuracy; ties go to the earliest round.
pub fn best_round(records: &[RoundRecord]) -> Option<&RoundRecord> {
    records.iter().fold(None, |best: Option<&RoundRecord>, r| match best {
        Some(b) if b.val_acc >= r.val_acc => Some(b),
        _ => Some(r),
    })
}

/// Writes one JSON object per line.
pub struct JsonlWriter {
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn write<T: Serialize>(&mut self, value: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, value)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_records(path: &Path) -> Result<Vec<RoundRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn weighted_average_examples() {
        assert_eq!(weighted_avg_acc(&[0.0, 1.0], &[1, 3]).unwrap(), 0.75);
        assert_eq!(weighted_avg_acc(&[0.4], &[7]).unwrap(), 0.4);
        assert!((weighted_avg_acc(&[0.2, 0.4, 0.9], &[5, 5, 5]).unwrap() - 0.5).abs() < 1e-15);
        assert!(weighted_avg_acc(&[0.5], &[1, 2]).is_err());
    }

    #[test]
    fn bottom_decile_ranks() {
        let ten: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).rev().collect();
        assert_eq!(bottom_decile_acc(&ten).unwrap(), 0.0);
        let twenty_five: Vec<f64> = (0..25).map(|i| i as f64).collect();
        assert_eq!(bottom_decile_acc(&twenty_five).unwrap(), 1.0);
        let hundred: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
        assert_eq!(bottom_decile_acc(&hundred).unwrap(), 0.10);
        assert_eq!(bottom_decile_acc(&[0.7, 0.3, 0.9]).unwrap(), 0.3);
    }

    #[test]
    fn comm_volume_counts() {
        assert_eq!(comm_volume(&[]), CommVolume::default());
        let mut u = SparseUpdate::empty(0, 1);
        u.blocks.insert(0, vec![1.0; 4]);
        u.blocks.insert(2, vec![1.0; 6]);
        let v = comm_volume(&[u.clone(), u]);
        assert_eq!(v.payload_floats, 20);
        assert_eq!(v.index_overhead, 4);
    }

    proptest! {
        #[test]
        fn bottom_decile_within_range(acc in proptest::collection::vec(0.0f64..=1.0, 1..60)) {
            let b = bottom_decile_acc(&acc).unwrap();
            let min = acc.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(b >= min && b <= max);
        }
    }
}
