//! Labelled datasets, the synthetic Gaussian-mixture task, and the non-IID
//! client partitioners.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::seed::{stream, Purpose};

/// Row-major feature matrix with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    dim: usize,
    n_classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize, n_classes: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::dim(
                "dataset",
                format!(
                    "{} feature values for {} samples of dim {}",
                    features.len(),
                    labels.len(),
                    dim
                ),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Domain(format!("label {bad} with {n_classes} classes")));
        }
        Ok(Self {
            dim,
            n_classes,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.sample(i));
        }
        Dataset {
            dim: self.dim,
            n_classes: self.n_classes,
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Features of the given rows as a `b × dim` tensor, plus their labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let sub = self.subset(indices);
        let x = Tensor::new(indices.len(), self.dim, sub.features).expect("batch shape");
        (x, sub.labels)
    }

    /// Per-feature mean over all samples, as a `1 × dim` tensor.
    pub fn mean_features(&self) -> Tensor {
        let mut mean = vec![0.0; self.dim];
        for i in 0..self.len() {
            for (m, v) in mean.iter_mut().zip(self.sample(i)) {
                *m += v;
            }
        }
        let n = self.len().max(1) as f64;
        Tensor::row(mean.into_iter().map(|m| m / n).collect())
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.n_classes];
        for &l in &self.labels {
            hist[l] += 1;
        }
        hist
    }

    /// Applies `x ← R·x` to every sample, with `rotation` a row-major `dim × dim` matrix.
    pub fn rotated(&self, rotation: &[f64]) -> Result<Dataset> {
        let d = self.dim;
        if rotation.len() != d * d {
            return Err(Error::dim(
                "rotated",
                format!("{} entries for a {d}x{d} rotation", rotation.len()),
            ));
        }
        let mut features = vec![0.0; self.features.len()];
        for i in 0..self.len() {
            let x = self.sample(i);
            for r in 0..d {
                features[i * d + r] = rotation[r * d..(r + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum();
            }
        }
        Ok(Dataset {
            features,
            ..self.clone()
        })
    }
}

/// Gaussian class clusters around unit-norm means with isotropic noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub n_classes: usize,
    pub feature_dim: usize,
    pub noise_std: f64,
    /// Per-client feature rotation strength; 0 disables feature skew.
    #[serde(default)]
    pub rotation_strength: f64,
}

impl SyntheticTask {
    /// Unit-norm class means, drawn as normalized Gaussian directions.
    pub fn class_means(&self, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = stream(seed, Purpose::ClassMeans, 0, 0);
        (0..self.n_classes)
            .map(|_| loop {
                let v: Vec<f64> = (0..self.feature_dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    break v.into_iter().map(|x| x / norm).collect();
                }
            })
            .collect()
    }

    /// `n_samples` points with labels balanced up to one, in shuffled order.
    pub fn generate(&self, n_samples: usize, seed: u64) -> Result<Dataset> {
        if self.n_classes == 0 || self.feature_dim == 0 {
            return Err(Error::config(
                "data.synthetic",
                "n_classes and feature_dim must be >= 1",
            ));
        }
        if n_samples < self.n_classes {
            return Err(Error::config(
                "data.synthetic",
                format!("{n_samples} samples cannot cover {} classes", self.n_classes),
            ));
        }
        let means = self.class_means(seed);
        let mut rng = stream(seed, Purpose::Samples, 0, 0);
        let mut labels: Vec<usize> = (0..n_samples).map(|i| i % self.n_classes).collect();
        labels.shuffle(&mut rng);
        let mut features = Vec::with_capacity(n_samples * self.feature_dim);
        for &l in &labels {
            for &mu in &means[l] {
                let noise: f64 = rng.sample(StandardNormal);
                features.push(mu + self.noise_std * noise);
            }
        }
        Dataset::new(self.feature_dim, self.n_classes, features, labels)
    }
}

/// A random orthogonal matrix near the identity: Gram-Schmidt applied to
/// `I + strength · N(0, 1)` (row-major).
pub fn random_rotation<R: Rng + ?Sized>(dim: usize, strength: f64, rng: &mut R) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = (0..dim)
        .map(|r| {
            (0..dim)
                .map(|c| {
                    let noise: f64 = rng.sample(StandardNormal);
                    f64::from(u8::from(r == c)) + strength * noise
                })
                .collect()
        })
        .collect();
    for r in 0..dim {
        for prev in 0..r {
            let dot: f64 = rows[r].iter().zip(&rows[prev]).map(|(a, b)| a * b).sum();
            let (head, tail) = rows.split_at_mut(r);
            for (v, p) in tail[0].iter_mut().zip(&head[prev]) {
                *v -= dot * p;
            }
        }
        let norm = rows[r].iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut rows[r] {
            *v /= norm;
        }
    }
    rows.concat()
}

/// Per-client sample index lists.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Partition {
    pub clients: Vec<Vec<usize>>,
}

impl Partition {
    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.clients.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> usize {
        self.clients.iter().map(Vec::len).sum()
    }
}

/// Label-skewed split: each class is spread over clients with proportions
/// drawn from `Dir(alpha)`. Draws are repeated (up to `max_retries` times)
/// until every client holds at least `min_samples`; after that, samples move
/// from the largest client to any client still short.
pub fn dirichlet_partition<R: Rng + ?Sized>(
    labels: &[usize],
    n_classes: usize,
    n_clients: usize,
    alpha: f64,
    min_samples: usize,
    rng: &mut R,
) -> Result<Partition> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config("data.partition.alpha", "must be a positive number"));
    }
    if n_clients == 0 {
        return Err(Error::config("data.n_clients", "must be >= 1"));
    }
    if labels.len() < n_clients * min_samples {
        return Err(Error::config(
            "data.min_client_samples",
            format!(
                "{} samples cannot give {n_clients} clients {min_samples} each",
                labels.len()
            ),
        ));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::config("data.partition.alpha", e.to_string()))?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }

    const MAX_RETRIES: usize = 100;
    let mut clients = vec![Vec::new(); n_clients];
    for _ in 0..MAX_RETRIES {
        clients = vec![Vec::new(); n_clients];
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(rng);
            let mut weights: Vec<f64> = (0..n_clients).map(|_| gamma.sample(rng)).collect();
            let total: f64 = weights.iter().sum();
            if total > 0.0 && total.is_finite() {
                weights.iter_mut().for_each(|w| *w /= total);
            } else {
                // every draw underflowed: the small-alpha limit puts all mass on one client
                weights = vec![0.0; n_clients];
                weights[rng.random_range(0..n_clients)] = 1.0;
            }
            let n = members.len();
            let mut cum = 0.0;
            let mut start = 0;
            for (c, w) in weights.iter().enumerate() {
                cum += w;
                let end = if c + 1 == n_clients {
                    n
                } else {
                    ((cum * n as f64).round() as usize).clamp(start, n)
                };
                clients[c].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if clients.iter().all(|c| c.len() >= min_samples) {
            break;
        }
    }

    while let Some(short) = clients.iter().position(|c| c.len() < min_samples) {
        let largest = (0..n_clients)
            .max_by_key(|&c| (clients[c].len(), std::cmp::Reverse(c)))
            .expect("clients");
        let moved = clients[largest].pop().expect("largest client is non-empty");
        clients[short].push(moved);
    }
    for c in &mut clients {
        c.sort_unstable();
    }
    Ok(Partition { clients })
}

/// Sort by label, cut into `n_clients · shards_per_client` equal shards and
/// deal `shards_per_client` random shards to each client.
pub fn pathological_partition<R: Rng + ?Sized>(
    labels: &[usize],
    n_clients: usize,
    shards_per_client: usize,
    rng: &mut R,
) -> Result<Partition> {
    if n_clients == 0 {
        return Err(Error::config("data.n_clients", "must be >= 1"));
    }
    if shards_per_client == 0 {
        return Err(Error::config("data.partition.shards_per_client", "must be >= 1"));
    }
    let n_shards = n_clients * shards_per_client;
    if labels.len() < n_shards {
        return Err(Error::config(
            "data.partition.shards_per_client",
            format!("{} samples cannot fill {n_shards} shards", labels.len()),
        ));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by_key(|&i| labels[i]);
    let base = labels.len() / n_shards;
    let extra = labels.len() % n_shards;
    let mut shards = Vec::with_capacity(n_shards);
    let mut start = 0;
    for s in 0..n_shards {
        let len = base + usize::from(s < extra);
        shards.push(&order[start..start + len]);
        start += len;
    }
    shards.shuffle(rng);
    let clients = shards
        .chunks(shards_per_client)
        .map(|group| {
            let mut c: Vec<usize> = group.concat();
            c.sort_unstable();
            c
        })
        .collect();
    Ok(Partition { clients })
}

/// One client's train/validation/test index lists.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffled 6:2:2 split; validation and test get `⌊0.2·n⌋` each and the
/// rounding remainder goes to training.
pub fn split_train_val_test<R: Rng + ?Sized>(indices: &[usize], rng: &mut R) -> Split {
    let mut shuffled = indices.to_vec();
    shuffled.shuffle(rng);
    let n = shuffled.len();
    let n_eval = n / 5;
    let test = shuffled[..n_eval].to_vec();
    let val = shuffled[n_eval..2 * n_eval].to_vec();
    let train = shuffled[2 * n_eval..].to_vec();
    Split { train, val, test }
}

/// Reads `label,f0,...,f{d-1}` rows; the class count is `max(label) + 1`.
pub fn read_csv<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let dim = headers.len().saturating_sub(1);
    if dim == 0 || &headers[0] != "label" {
        return Err(Error::config("data.csv", "header must be label,f0,...,f{d-1}"));
    }
    for (j, name) in headers.iter().skip(1).enumerate() {
        if name != format!("f{j}") {
            return Err(Error::config(
                "data.csv",
                format!("column {} is `{name}`, expected `f{j}`", j + 1),
            ));
        }
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let parse_err = |what: &str| Error::config("data.csv", format!("row {}: bad {what}", row + 1));
        labels.push(record[0].trim().parse::<usize>().map_err(|_| parse_err("label"))?);
        for field in record.iter().skip(1) {
            features.push(field.trim().parse::<f64>().map_err(|_| parse_err("feature"))?);
        }
    }
    if labels.is_empty() {
        return Err(Error::config("data.csv", "no rows"));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(dim, n_classes, features, labels)
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    read_csv(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn task(noise: f64) -> SyntheticTask {
        SyntheticTask {
            n_classes: 5,
            feature_dim: 16,
            noise_std: noise,
            rotation_strength: 0.0,
        }
    }

    #[test]
    fn noiseless_samples_are_class_means() {
        let t = task(0.0);
        let data = t.generate(50, 3).unwrap();
        let means = t.class_means(3);
        for i in 0..data.len() {
            assert_eq!(data.sample(i), means[data.labels()[i]].as_slice());
        }
        for m in &means {
            assert!((m.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn generation_is_reproducible_and_balanced() {
        let a = task(0.3).generate(103, 9).unwrap();
        assert_eq!(a, task(0.3).generate(103, 9).unwrap());
        let hist = a.label_histogram();
        assert!(hist.iter().max().unwrap() - hist.iter().min().unwrap() <= 1);
        assert!(task(0.3).generate(4, 9).is_err());
    }

    #[test]
    fn rotation_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = 6;
        let r = random_rotation(d, 0.5, &mut rng);
        for a in 0..d {
            for b in 0..d {
                let dot: f64 = (0..d).map(|k| r[a * d + k] * r[b * d + k]).sum();
                let expected = if a == b { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-12);
            }
        }
        let identity = random_rotation(d, 0.0, &mut rng);
        for a in 0..d {
            for b in 0..d {
                assert_eq!(identity[a * d + b], if a == b { 1.0 } else { 0.0 });
            }
        }
        let data = task(0.2).generate(20, 1).unwrap();
        let eye16 = random_rotation(16, 0.0, &mut rng);
        assert_eq!(data.rotated(&eye16).unwrap(), data);
    }

    #[test]
    fn split_ratios() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let idx: Vec<usize> = (0..23).collect();
        let s = split_train_val_test(&idx, &mut rng);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (15, 4, 4));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, idx);
    }

    #[test]
    fn pathological_shards_limit_labels() {
        let data = SyntheticTask {
            n_classes: 10,
            ..task(0.1)
        }
        .generate(1000, 2)
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = pathological_partition(data.labels(), 10, 2, &mut rng).unwrap();
        assert_eq!(p.total(), 1000);
        for c in &p.clients {
            let mut seen: Vec<usize> = c.iter().map(|&i| data.labels()[i]).collect();
            seen.dedup();
            seen.sort_unstable();
            seen.dedup();
            assert!(seen.len() <= 4);
        }
        let again = pathological_partition(data.labels(), 10, 2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn csv_round_trip_and_header_check() {
        let text = "label,f0,f1\n1,0.5,-1\n0,2,3.25\n";
        let data = read_csv(text.as_bytes()).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(data.n_classes(), 2);
        assert_eq!(data.sample(1), &[2.0, 3.25]);
        assert!(read_csv("label,x0\n0,1\n".as_bytes()).is_err());
        assert!(read_csv("label,f0\nz,1\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn dirichlet_conserves_and_fills_clients(seed in 0u64..200, alpha in 0.01f64..10.0, n_clients in 1usize..12) {
            let labels: Vec<usize> = (0..300).map(|i| i % 5).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = dirichlet_partition(&labels, 5, n_clients, alpha, 5, &mut rng).unwrap();
            let mut all: Vec<usize> = p.clients.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..300).collect::<Vec<_>>());
            prop_assert!(p.clients.iter().all(|c| c.len() >= 5));
        }
    }
}
