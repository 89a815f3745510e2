//! Composite layers built from tape primitives, so their gradients come for free.

use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// `x · w (+ bias)`, bias broadcast over the batch.
pub fn dense_forward(tape: &mut Tape, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match bias {
        Some(b) => {
            if tape.value(b).shape() != (1, tape.value(y).cols()) {
                return Err(Error::dim(
                    "dense_forward",
                    format!("bias {:?} for {} outputs", tape.value(b).shape(), tape.value(y).cols()),
                ));
            }
            tape.add(y, b)
        }
        None => Ok(y),
    }
}

/// Batch normalization with current-batch statistics (biased variance).
pub fn batch_norm(tape: &mut Tape, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    if tape.value(x).rows() == 0 {
        return Err(Error::EmptyBatch("batch_norm"));
    }
    check_affine(tape, "batch_norm", x, gamma, beta)?;
    let mu = tape.mean_rows(x)?;
    let centered = tape.sub(x, mu)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.mean_rows(sq)?;
    let normalized = normalize(tape, centered, var, eps)?;
    affine(tape, normalized, gamma, beta)
}

/// Switchable normalization over flat features: a learned softmax mixture of
/// batch statistics (per feature) and layer statistics (per sample), with
/// independent mixture weights for the mean and the variance.
///
/// Instance statistics coincide with layer statistics for `b × n` inputs, so
/// only two components are mixed.
pub fn switchable_norm(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    mix_mean_logits: Var,
    mix_var_logits: Var,
    eps: f64,
) -> Result<Var> {
    if tape.value(x).rows() == 0 {
        return Err(Error::EmptyBatch("switchable_norm"));
    }
    check_affine(tape, "switchable_norm", x, gamma, beta)?;
    for logits in [mix_mean_logits, mix_var_logits] {
        if tape.value(logits).shape() != (1, 2) {
            return Err(Error::dim("switchable_norm", "mixture logits must be 1x2"));
        }
    }

    let mu_bn = tape.mean_rows(x)?;
    let c_bn = tape.sub(x, mu_bn)?;
    let sq_bn = tape.mul(c_bn, c_bn)?;
    let var_bn = tape.mean_rows(sq_bn)?;

    let mu_ln = tape.mean_cols(x)?;
    let c_ln = tape.sub(x, mu_ln)?;
    let sq_ln = tape.mul(c_ln, c_ln)?;
    let var_ln = tape.mean_cols(sq_ln)?;

    let w_mean = tape.softmax_rows(mix_mean_logits);
    let w_var = tape.softmax_rows(mix_var_logits);
    let mu = mix(tape, w_mean, mu_bn, mu_ln)?;
    let var = mix(tape, w_var, var_bn, var_ln)?;

    let centered = tape.sub(x, mu)?;
    let normalized = normalize(tape, centered, var, eps)?;
    affine(tape, normalized, gamma, beta)
}

fn mix(tape: &mut Tape, weights: Var, bn: Var, ln: Var) -> Result<Var> {
    let w_bn = tape.column(weights, 0)?;
    let w_ln = tape.column(weights, 1)?;
    let a = tape.mul(w_bn, bn)?;
    let b = tape.mul(w_ln, ln)?;
    tape.add(a, b)
}

fn normalize(tape: &mut Tape, centered: Var, var: Var, eps: f64) -> Result<Var> {
    let eps = tape.scalar(eps);
    let shifted = tape.add(var, eps)?;
    let std = tape.sqrt(shifted);
    tape.div(centered, std)
}

fn affine(tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let scaled = tape.mul(x, gamma)?;
    tape.add(scaled, beta)
}

fn check_affine(tape: &Tape, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<()> {
    let n = tape.value(x).cols();
    for p in [gamma, beta] {
        if tape.value(p).shape() != (1, n) {
            return Err(Error::dim(
                op,
                format!("affine parameter {:?} for {n} features", tape.value(p).shape()),
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    fn unit_affine(tape: &mut Tape, n: usize) -> (Var, Var) {
        (tape.leaf(Tensor::filled(1, n, 1.0)), tape.leaf(Tensor::zeros(1, n)))
    }

    #[test]
    fn dense_matches_naive_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (xv, wv) = (random(&mut rng, 4, 3), random(&mut rng, 3, 2));
        let mut tape = Tape::new();
        let x = tape.leaf(xv.clone());
        let w = tape.leaf(wv.clone());
        let y = dense_forward(&mut tape, x, w, None).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += xv.get(i, k) * wv.get(k, j);
                }
                assert!((tape.value(y).get(i, j) - acc).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn batch_norm_identical_rows_collapse_to_beta() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![0.3, -1.2], vec![0.3, -1.2], vec![0.3, -1.2]]).unwrap());
        let gamma = tape.leaf(Tensor::row(vec![2.0, 3.0]));
        let beta = tape.leaf(Tensor::row(vec![0.5, -0.25]));
        let y = batch_norm(&mut tape, x, gamma, beta, 1e-5).unwrap();
        for r in 0..3 {
            assert!((tape.value(y).get(r, 0) - 0.5).abs() < 1e-9);
            assert!((tape.value(y).get(r, 1) + 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_norm_two_points() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![0.0], vec![2.0]]).unwrap());
        let (g, b) = unit_affine(&mut tape, 1);
        let y = batch_norm(&mut tape, x, g, b, 1e-5).unwrap();
        let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((tape.value(y).get(0, 0) + expected).abs() < 1e-15);
        assert!((tape.value(y).get(1, 0) - expected).abs() < 1e-15);
    }

    #[test]
    fn batch_norm_random_columns_are_centered() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.leaf(random(&mut rng, 8, 4));
        let (g, b) = unit_affine(&mut tape, 4);
        let y = batch_norm(&mut tape, x, g, b, 1e-5).unwrap();
        let yv = tape.value(y);
        for c in 0..4 {
            let mean: f64 = (0..8).map(|r| yv.get(r, c)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-10);
        }
    }

    #[test]
    fn batch_norm_rejects_empty_batch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(0, 3));
        let (g, b) = unit_affine(&mut tape, 3);
        assert!(matches!(
            batch_norm(&mut tape, x, g, b, 1e-5),
            Err(Error::EmptyBatch(_))
        ));
    }

    #[test]
    fn switchable_norm_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xv = random(&mut rng, 6, 4);

        // BN-dominant mixture reproduces batch norm
        let mut tape = Tape::new();
        let x = tape.leaf(xv.clone());
        let (g, b) = unit_affine(&mut tape, 4);
        let bn_logits = tape.leaf(Tensor::row(vec![60.0, -60.0]));
        let sn = switchable_norm(&mut tape, x, g, b, bn_logits, bn_logits, 1e-5).unwrap();
        let bn = batch_norm(&mut tape, x, g, b, 1e-5).unwrap();
        for (p, q) in tape.value(sn).data().iter().zip(tape.value(bn).data()) {
            assert!((p - q).abs() < 1e-8);
        }

        // LN-dominant mixture centers every row
        let ln_logits = tape.leaf(Tensor::row(vec![-60.0, 60.0]));
        let ln = switchable_norm(&mut tape, x, g, b, ln_logits, ln_logits, 1e-5).unwrap();
        let yv = tape.value(ln);
        for r in 0..6 {
            let mean: f64 = yv.row_slice(r).iter().sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-10);
        }
    }

    #[test]
    fn switchable_norm_single_sample_bn_dominant_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![0.4, -1.0, 3.0]));
        let (g, b) = unit_affine(&mut tape, 3);
        let logits = tape.leaf(Tensor::row(vec![60.0, -60.0]));
        let y = switchable_norm(&mut tape, x, g, b, logits, logits, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-8));
    }
}
