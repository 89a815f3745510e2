//! Statistical checks on the synthetic task and the partitioners.

use pfedgate::autodiff::{dense_forward, Tape, Tensor};
use pfedgate::data::{dirichlet_partition, pathological_partition, Dataset, SyntheticTask};
use pfedgate::model::argmax_rows;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn task(noise_std: f64) -> SyntheticTask {
    SyntheticTask {
        n_classes: 5,
        feature_dim: 16,
        noise_std,
        rotation_strength: 0.0,
    }
}

fn histogram(labels: &[usize], indices: &[usize], k: usize) -> Vec<f64> {
    let mut h = vec![0.0; k];
    for &i in indices {
        h[labels[i]] += 1.0;
    }
    let n = indices.len() as f64;
    h.iter().map(|c| c / n).collect()
}

#[test]
fn huge_alpha_gives_near_global_histograms() {
    let data = task(0.5).generate(20_000, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p = dirichlet_partition(data.labels(), 5, 10, 1e6, 1, &mut rng).unwrap();
    let all: Vec<usize> = (0..data.len()).collect();
    let global = histogram(data.labels(), &all, 5);
    for client in &p.clients {
        let h = histogram(data.labels(), client, 5);
        for (a, b) in h.iter().zip(&global) {
            assert!((a - b).abs() <= 0.05, "{h:?} vs {global:?}");
        }
    }
}

#[test]
fn tiny_alpha_concentrates_labels() {
    let data = task(0.5).generate(2_000, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let p = dirichlet_partition(data.labels(), 5, 10, 0.01, 1, &mut rng).unwrap();
    assert_eq!(p.total(), data.len());
    let mut top_two: Vec<f64> = p
        .clients
        .iter()
        .map(|c| {
            let mut h = histogram(data.labels(), c, 5);
            h.sort_by(|a, b| b.total_cmp(a));
            h[0] + h[1]
        })
        .collect();
    top_two.sort_by(f64::total_cmp);
    let median = (top_two[4] + top_two[5]) / 2.0;
    assert!(median >= 0.8, "median top-2 mass {median}");
}

#[test]
fn pathological_clients_see_few_labels() {
    let data = task(0.5).generate(1_000, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let p = pathological_partition(data.labels(), 10, 2, &mut rng).unwrap();
    assert_eq!(p.total(), data.len());
    for c in &p.clients {
        let seen = histogram(data.labels(), c, 5).iter().filter(|h| **h > 0.0).count();
        assert!(seen <= 2, "client sees {seen} labels");
    }
}

/// Multinomial logistic regression trained with full-batch gradient descent.
fn linear_probe(train: &Dataset, test: &Dataset) -> f64 {
    let (d, k) = (train.dim(), train.n_classes());
    let all: Vec<usize> = (0..train.len()).collect();
    let (xb, yb) = train.batch(&all);
    let mut w = Tensor::zeros(d, k);
    let mut b = Tensor::zeros(1, k);
    for _ in 0..200 {
        let mut tape = Tape::new();
        let x = tape.leaf(xb.clone());
        let wv = tape.leaf(w.clone());
        let bv = tape.leaf(b.clone());
        let z = dense_forward(&mut tape, x, wv, Some(bv)).unwrap();
        let loss = tape.softmax_cross_entropy(z, &yb).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (p, g) in w.data_mut().iter_mut().zip(grads.get(wv).data()) {
            *p -= 1.0 * g;
        }
        for (p, g) in b.data_mut().iter_mut().zip(grads.get(bv).data()) {
            *p -= 1.0 * g;
        }
    }
    let all: Vec<usize> = (0..test.len()).collect();
    let (xt, yt) = test.batch(&all);
    let mut tape = Tape::new();
    let x = tape.leaf(xt);
    let wv = tape.leaf(w);
    let bv = tape.leaf(b);
    let z = dense_forward(&mut tape, x, wv, Some(bv)).unwrap();
    let pred = argmax_rows(tape.value(z));
    pred.iter().zip(&yt).filter(|(p, y)| p == y).count() as f64 / yt.len() as f64
}

#[test]
fn low_noise_task_is_linearly_separable() {
    let data = task(0.1).generate(1_500, 21).unwrap();
    let train = data.subset(&(0..1_000).collect::<Vec<_>>());
    let test = data.subset(&(1_000..1_500).collect::<Vec<_>>());
    let acc = linear_probe(&train, &test);
    assert!(acc > 0.95, "linear probe accuracy {acc}");
}

#[test]
fn class_means_are_unit_and_distinct() {
    let means = task(0.5).class_means(9);
    for (i, m) in means.iter().enumerate() {
        let norm: f64 = m.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        for other in &means[i + 1..] {
            assert_ne!(m, other);
        }
    }
}
