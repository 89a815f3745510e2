//! The personalized gating layer.
//!
//! A client-private two-path network maps a data batch to block-wise gated
//! weights `m` and importance scores `g` (both in `(0, 1)^L`):
//!
//! ```text
//! x ─ switchable norm ─┬─ x·W_M ─ batch norm ─ sigmoid ─ mean over batch ─ m
//!                      └─ x·W_G ─ batch norm ─ sigmoid ─ mean over batch ─ g
//! ```
//!
//! A knapsack over `g` picks the blocks that fit the sparsity budget, the
//! straight-through node turns that into `m′ = m ⊙ I*`, and the shared model
//! is adapted block-wise as `θ′ = θ_g ⊛ m′`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{batch_norm, switchable_norm, Tape, Tensor, Var};
use crate::blocks::BlockPartition;
use crate::error::{Error, Result};
use crate::knapsack::{solve_greedy, KnapsackInstance};
use crate::model::ModelSpec;

pub const NORM_EPS: f64 = 1e-5;

/// Architecture toggles used for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatingOptions {
    pub pre_norm: bool,
    pub post_norm: bool,
    pub sigmoid: bool,
    /// Gate on the mean-pooled local training features instead of each batch.
    pub client_wise: bool,
    /// Force `m′ = 1` and freeze the gating layer; reduces to dense training.
    pub identity_gating_debug: bool,
}

impl Default for GatingOptions {
    fn default() -> Self {
        Self {
            pre_norm: true,
            post_norm: true,
            sigmoid: true,
            client_wise: false,
            identity_gating_debug: false,
        }
    }
}

/// Gating parameters `φ`.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingLayer {
    pub pre_gamma: Tensor,
    pub pre_beta: Tensor,
    pub mix_mean_logits: Tensor,
    pub mix_var_logits: Tensor,
    pub head_m: Tensor,
    pub head_g: Tensor,
    pub post_m_gamma: Tensor,
    pub post_m_beta: Tensor,
    pub post_g_gamma: Tensor,
    pub post_g_beta: Tensor,
}

pub const PARAM_NAMES: [&str; 10] = [
    "pre_norm.gamma",
    "pre_norm.beta",
    "pre_norm.mix_mean_logits",
    "pre_norm.mix_var_logits",
    "head_m.weight",
    "head_g.weight",
    "post_norm_m.gamma",
    "post_norm_m.beta",
    "post_norm_g.gamma",
    "post_norm_g.beta",
];

impl GatingLayer {
    /// Heads get Kaiming-uniform fan-in initialization; norms start as the
    /// identity affine map and the normalization mixture starts balanced.
    pub fn new<R: Rng + ?Sized>(input_dim: usize, n_blocks: usize, rng: &mut R) -> Self {
        let bound = (6.0 / input_dim as f64).sqrt();
        let mut head = || {
            Tensor::new(
                input_dim,
                n_blocks,
                (0..input_dim * n_blocks)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect(),
            )
            .expect("shape")
        };
        let head_m = head();
        let head_g = head();
        Self {
            pre_gamma: Tensor::filled(1, input_dim, 1.0),
            pre_beta: Tensor::zeros(1, input_dim),
            mix_mean_logits: Tensor::zeros(1, 2),
            mix_var_logits: Tensor::zeros(1, 2),
            head_m,
            head_g,
            post_m_gamma: Tensor::filled(1, n_blocks, 1.0),
            post_m_beta: Tensor::zeros(1, n_blocks),
            post_g_gamma: Tensor::filled(1, n_blocks, 1.0),
            post_g_beta: Tensor::zeros(1, n_blocks),
        }
    }

    fn zeros(input_dim: usize, n_blocks: usize) -> Self {
        let row = |n| Tensor::zeros(1, n);
        Self {
            pre_gamma: row(input_dim),
            pre_beta: row(input_dim),
            mix_mean_logits: row(2),
            mix_var_logits: row(2),
            head_m: Tensor::zeros(input_dim, n_blocks),
            head_g: Tensor::zeros(input_dim, n_blocks),
            post_m_gamma: row(n_blocks),
            post_m_beta: row(n_blocks),
            post_g_gamma: row(n_blocks),
            post_g_beta: row(n_blocks),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.head_m.rows()
    }

    pub fn n_blocks(&self) -> usize {
        self.head_m.cols()
    }

    /// Parameter count of the two fully connected heads, `2 · d_X · L`.
    pub fn head_param_count(&self) -> usize {
        self.head_m.len() + self.head_g.len()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn tensors(&self) -> [&Tensor; 10] {
        [
            &self.pre_gamma,
            &self.pre_beta,
            &self.mix_mean_logits,
            &self.mix_var_logits,
            &self.head_m,
            &self.head_g,
            &self.post_m_gamma,
            &self.post_m_beta,
            &self.post_g_gamma,
            &self.post_g_beta,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 10] {
        [
            &mut self.pre_gamma,
            &mut self.pre_beta,
            &mut self.mix_mean_logits,
            &mut self.mix_var_logits,
            &mut self.head_m,
            &mut self.head_g,
            &mut self.post_m_gamma,
            &mut self.post_m_beta,
            &mut self.post_g_gamma,
            &mut self.post_g_beta,
        ]
    }

    /// Concatenation of all parameters in [`PARAM_NAMES`] order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn from_flat(input_dim: usize, n_blocks: usize, flat: &[f64]) -> Result<Self> {
        let mut layer = Self::zeros(input_dim, n_blocks);
        if flat.len() != layer.param_count() {
            return Err(Error::dim(
                "gating.from_flat",
                format!("{} values for {} parameters", flat.len(), layer.param_count()),
            ));
        }
        let mut offset = 0;
        for t in layer.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(layer)
    }

    /// Records every parameter as a leaf.
    pub fn register(&self, tape: &mut Tape) -> GatingVars {
        let vars = self.tensors().map(|t| tape.leaf(t.clone()));
        GatingVars(vars)
    }
}

/// Tape handles for the ten gating tensors, in [`PARAM_NAMES`] order.
#[derive(Clone, Copy, Debug)]
pub struct GatingVars(pub [Var; 10]);

impl GatingVars {
    pub fn from_slice(vars: &[Var]) -> Self {
        let mut out = [vars[0]; 10];
        out.copy_from_slice(&vars[..10]);
        Self(out)
    }
}

/// Batch-level gating outputs `(m, g)` as `1 × L` nodes.
pub fn gate_forward(tape: &mut Tape, phi: &GatingVars, x: Var, opts: &GatingOptions) -> Result<(Var, Var)> {
    let [pre_g, pre_b, mix_mu, mix_var, head_m, head_g, pm_g, pm_b, pg_g, pg_b] = phi.0;
    let xv = tape.value(x);
    if xv.rows() == 0 {
        return Err(Error::EmptyBatch("gate_forward"));
    }
    if xv.cols() != tape.value(head_m).rows() {
        return Err(Error::dim(
            "gate_forward",
            format!(
                "batch has {} features, gating layer expects {}",
                xv.cols(),
                tape.value(head_m).rows()
            ),
        ));
    }
    let h = if opts.pre_norm {
        switchable_norm(tape, x, pre_g, pre_b, mix_mu, mix_var, NORM_EPS)?
    } else {
        x
    };
    let mut path = |w: Var, gamma: Var, beta: Var| -> Result<Var> {
        let mut z = tape.matmul(h, w)?;
        if opts.post_norm {
            z = batch_norm(tape, z, gamma, beta, NORM_EPS)?;
        }
        if opts.sigmoid {
            z = tape.sigmoid(z);
        }
        tape.mean_rows(z)
    };
    let m = path(head_m, pm_g, pm_b)?;
    let g = path(head_g, pg_g, pg_b)?;
    Ok((m, g))
}

/// Gating on one mean-pooled feature vector (`1 × d_X`).
pub fn client_wise_forward(tape: &mut Tape, phi: &GatingVars, mean_x: Var, opts: &GatingOptions) -> Result<(Var, Var)> {
    if tape.value(mean_x).rows() != 1 {
        return Err(Error::dim("client_wise_forward", "expects a single pooled row"));
    }
    gate_forward(tape, phi, mean_x, opts)
}

/// Knapsack selection `I*` over importance scores under budget `s`.
pub fn sparsify(g: &[f64], partition: &BlockPartition, s: f64) -> Result<Vec<bool>> {
    if g.len() != partition.n_blocks() {
        return Err(Error::dim(
            "sparsify",
            format!("{} scores for {} blocks", g.len(), partition.n_blocks()),
        ));
    }
    let min_feasible = partition.min_feasible_sparsity();
    if s < min_feasible {
        return Err(Error::Infeasible {
            requested: s,
            min_feasible,
        });
    }
    let inst = KnapsackInstance {
        values: g.to_vec(),
        weights: partition.sizes(),
        budget: partition.budget(s),
        mandatory: partition.mandatory().to_vec(),
    };
    solve_greedy(&inst).map_err(|e| match e {
        Error::Infeasible { .. } => Error::Infeasible {
            requested: s,
            min_feasible,
        },
        other => other,
    })
}

/// `m′ = I* ⊙ m` forward; gradients reach `m` through `I*` and `g` through `m`.
pub fn straight_through_combine(tape: &mut Tape, m: Var, g: Var, i_star: &[bool]) -> Result<Var> {
    tape.straight_through(m, g, i_star)
}

/// `θ′ = θ_g ⊛ m′` on the tape.
pub fn adapt(tape: &mut Tape, theta: Var, partition: &BlockPartition, m_prime: Var) -> Result<Var> {
    tape.block_scale(theta, m_prime, partition.ranges())
}

/// What the gate decided for one batch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GateDecision {
    pub m: Vec<f64>,
    pub g: Vec<f64>,
    pub i_star: Vec<bool>,
    pub m_prime: Vec<f64>,
    /// `|I*·W| / d`.
    pub block_fraction: f64,
}

/// How the block selection is obtained.
#[derive(Clone, Copy, Debug)]
pub enum Selection<'a> {
    /// Solve the knapsack at this sparsity budget.
    Budget(f64),
    /// Use a precomputed selection (held fixed, e.g. across finite-difference probes).
    Fixed(&'a [bool]),
    /// Fixed selection, combined through the explicit surrogate
    /// `(I* − g_detached + g) ⊙ m` built from ordinary ops. Its true
    /// derivative is the straight-through gradient, which makes it a
    /// finite-difference oracle for the fused node.
    Surrogate { mask: &'a [bool], g_detached: &'a [f64] },
}

/// Output of [`gated_forward`].
pub struct GatedOutput {
    pub logits: Var,
    pub theta_prime: Var,
    pub decision: GateDecision,
}

/// Full personalized forward pass: gate → select → straight-through →
/// adapt → model logits.
///
/// `gate_input` is the batch itself, or the pooled client features in
/// client-wise mode.
#[allow(clippy::too_many_arguments)]
pub fn gated_forward(
    tape: &mut Tape,
    spec: &ModelSpec,
    partition: &BlockPartition,
    theta: Var,
    phi: &GatingVars,
    gate_input: Var,
    x: Var,
    opts: &GatingOptions,
    selection: Selection<'_>,
) -> Result<GatedOutput> {
    let n_blocks = partition.n_blocks();
    if opts.identity_gating_debug {
        let logits = spec.forward(tape, theta, x)?;
        let decision = GateDecision {
            m: vec![1.0; n_blocks],
            g: vec![1.0; n_blocks],
            i_star: vec![true; n_blocks],
            m_prime: vec![1.0; n_blocks],
            block_fraction: 1.0,
        };
        return Ok(GatedOutput {
            logits,
            theta_prime: theta,
            decision,
        });
    }

    let (m, g) = gate_forward(tape, phi, gate_input, opts)?;
    let g_values = tape.value(g).data().to_vec();
    let (i_star, m_prime) = match selection {
        Selection::Budget(s) => {
            let i_star = sparsify(&g_values, partition, s)?;
            let m_prime = straight_through_combine(tape, m, g, &i_star)?;
            (i_star, m_prime)
        }
        Selection::Fixed(mask) => (mask.to_vec(), straight_through_combine(tape, m, g, mask)?),
        Selection::Surrogate { mask, g_detached } => {
            if mask.len() != n_blocks || g_detached.len() != n_blocks {
                return Err(Error::dim("gated_forward", "surrogate selection length"));
            }
            let offset: Vec<f64> = mask
                .iter()
                .zip(g_detached)
                .map(|(&keep, &g0)| if keep { 1.0 } else { 0.0 } - g0)
                .collect();
            let offset = tape.leaf(Tensor::row(offset));
            let i_st = tape.add(offset, g)?;
            (mask.to_vec(), tape.mul(i_st, m)?)
        }
    };
    let theta_prime = adapt(tape, theta, partition, m_prime)?;
    let logits = spec.forward(tape, theta_prime, x)?;

    let sizes = partition.sizes();
    let selected: usize = sizes.iter().zip(&i_star).filter(|(_, s)| **s).map(|(w, _)| w).sum();
    let decision = GateDecision {
        m: tape.value(m).data().to_vec(),
        g: g_values,
        m_prime: tape.value(m_prime).data().to_vec(),
        block_fraction: selected as f64 / partition.n_params() as f64,
        i_star,
    };
    Ok(GatedOutput {
        logits,
        theta_prime,
        decision,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn head_parameter_count() {
        let phi = GatingLayer::new(16, 20, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(phi.head_param_count(), 2 * 16 * 20);
        assert_eq!(phi.param_count(), 2 * 16 * 20 + 2 * 16 + 4 + 4 * 20);
    }

    #[test]
    fn zero_heads_give_half_gates() {
        let mut phi = GatingLayer::new(4, 6, &mut ChaCha8Rng::seed_from_u64(0));
        phi.head_m = Tensor::zeros(4, 6);
        phi.head_g = Tensor::zeros(4, 6);
        let mut tape = Tape::new();
        let vars = phi.register(&mut tape);
        let x = tape.leaf(batch(&mut ChaCha8Rng::seed_from_u64(1), 5, 4));
        let (m, g) = gate_forward(&mut tape, &vars, x, &GatingOptions::default()).unwrap();
        assert_eq!(tape.value(m).data(), &[0.5; 6]);
        assert_eq!(tape.value(g).data(), &[0.5; 6]);
    }

    #[test]
    fn identical_batch_matches_single_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let phi = GatingLayer::new(4, 5, &mut rng);
        let sample = batch(&mut rng, 1, 4);
        let repeated = Tensor::from_rows(&vec![sample.data().to_vec(); 6]).unwrap();
        let opts = GatingOptions::default();

        let mut tape = Tape::new();
        let vars = phi.register(&mut tape);
        let one = tape.leaf(sample);
        let many = tape.leaf(repeated);
        let (m1, g1) = client_wise_forward(&mut tape, &vars, one, &opts).unwrap();
        let (m6, g6) = gate_forward(&mut tape, &vars, many, &opts).unwrap();
        for (a, b) in tape.value(m1).data().iter().zip(tape.value(m6).data()) {
            assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in tape.value(g1).data().iter().zip(tape.value(g6).data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn outputs_strictly_inside_unit_interval() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let phi = GatingLayer::new(8, 12, &mut rng);
            let mut tape = Tape::new();
            let vars = phi.register(&mut tape);
            let x = tape.leaf(batch(&mut rng, 7, 8));
            let (m, g) = gate_forward(&mut tape, &vars, x, &GatingOptions::default()).unwrap();
            for v in tape.value(m).data().iter().chain(tape.value(g).data()) {
                assert!(*v > 0.0 && *v < 1.0);
            }
        }
    }

    #[test]
    fn feature_mismatch_is_rejected() {
        let phi = GatingLayer::new(4, 3, &mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::new();
        let vars = phi.register(&mut tape);
        let x = tape.leaf(Tensor::zeros(2, 5));
        assert!(gate_forward(&mut tape, &vars, x, &GatingOptions::default()).is_err());
    }

    #[test]
    fn ablations_all_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let phi = GatingLayer::new(4, 3, &mut rng);
        let xv = batch(&mut rng, 5, 4);
        for bits in 0..8u8 {
            let opts = GatingOptions {
                pre_norm: bits & 1 == 1,
                post_norm: bits & 2 == 2,
                sigmoid: bits & 4 == 4,
                ..Default::default()
            };
            let mut tape = Tape::new();
            let vars = phi.register(&mut tape);
            let x = tape.leaf(xv.clone());
            let (m, _) = gate_forward(&mut tape, &vars, x, &opts).unwrap();
            assert!(tape.value(m).is_finite());
        }
    }

    fn partition() -> (ModelSpec, BlockPartition) {
        let spec = ModelSpec::new(vec![6, 10, 3], true).unwrap();
        let p = BlockPartition::split(&spec, 5, 0.1).unwrap();
        (spec, p)
    }

    #[test]
    fn sparsify_extremes() {
        let (_, p) = partition();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g: Vec<f64> = (0..p.n_blocks()).map(|_| rng.random_range(0.01..0.99)).collect();
        assert_eq!(sparsify(&g, &p, 1.0).unwrap(), vec![true; p.n_blocks()]);
        let min = p.min_feasible_sparsity();
        assert_eq!(sparsify(&g, &p, min).unwrap(), p.mandatory().to_vec());
        match sparsify(&g, &p, min * 0.5) {
            Err(Error::Infeasible { min_feasible, .. }) => assert_eq!(min_feasible, min),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sparsify_respects_budget() {
        let (_, p) = partition();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let g: Vec<f64> = (0..p.n_blocks()).map(|_| rng.random_range(0.01..0.99)).collect();
            let s = rng.random_range(p.min_feasible_sparsity()..1.0);
            let sel = sparsify(&g, &p, s).unwrap();
            let used: usize = p.sizes().iter().zip(&sel).filter(|(_, x)| **x).map(|(w, _)| w).sum();
            assert!(used as f64 / p.n_params() as f64 <= s);
            assert!(p.mandatory().iter().zip(&sel).all(|(m, x)| !m || *x));
        }
    }

    #[test]
    fn straight_through_all_selected() {
        let mut tape = Tape::new();
        let m = tape.leaf(Tensor::row(vec![0.2, 0.4]));
        let g = tape.leaf(Tensor::row(vec![0.6, 0.9]));
        let mp = straight_through_combine(&mut tape, m, g, &[true, true]).unwrap();
        assert_eq!(tape.value(mp).data(), &[0.2, 0.4]);
        let w = tape.leaf(Tensor::row(vec![3.0, 5.0]));
        let y = tape.mul(mp, w).unwrap();
        let loss = tape.mean_cols(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        // upstream is w/2; grad to g is upstream ⊙ m
        assert_eq!(grads.get(g).data(), &[1.5 * 0.2, 2.5 * 0.4]);
    }

    #[test]
    fn adapt_gradients_match_finite_differences() {
        let (spec, p) = partition();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let theta = spec.init_params(&mut rng).to_tensor();
        let gates = Tensor::row((0..p.n_blocks()).map(|_| rng.random_range(0.1..1.0)).collect());
        let x = batch(&mut rng, 4, 6);
        let labels = [0, 1, 2, 1];
        let report = grad_check(&[theta, gates], 1e-4, |tape, v| {
            let tp = adapt(tape, v[0], &p, v[1])?;
            let xv = tape.leaf(x.clone());
            let z = spec.forward(tape, tp, xv)?;
            tape.softmax_cross_entropy(z, &labels)
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn flat_round_trip() {
        let phi = GatingLayer::new(5, 7, &mut ChaCha8Rng::seed_from_u64(6));
        let back = GatingLayer::from_flat(5, 7, &phi.to_flat()).unwrap();
        assert_eq!(back, phi);
        assert!(GatingLayer::from_flat(5, 7, &[0.0; 3]).is_err());
    }
}
