//! Finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Central-difference scheme used for the numeric side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`.
    ThreePoint { step: f64 },
    /// `(f(x−2h) − 8f(x−h) + 8f(x+h) − f(x+2h)) / 12h`, halving `h` (down to
    /// `min_step`) whenever a probe changes the relu sign pattern.
    ///
    /// A larger step keeps loss round-off well below the 1e-8 error floor,
    /// which the three-point rule at 1e-5 cannot do for gradients near zero.
    FivePoint { step: f64, min_step: f64 },
}

impl Default for Stencil {
    fn default() -> Self {
        Stencil::ThreePoint { step: FD_STEP }
    }
}

#[derive(Clone, Debug)]
pub struct LeafReport {
    pub leaf: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.leaves.iter().map(|l| l.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }
}

/// Compares tape gradients of `build` against three-point central differences.
///
/// `build` receives a fresh tape plus one leaf per entry of `params`, and
/// must return a scalar loss node. It is re-run for every perturbed entry,
/// so any discrete choices inside it must not depend on the perturbation.
pub fn grad_check<F>(params: &[Tensor], tolerance: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with(params, tolerance, Stencil::default(), &build, &build)
}

/// Like [`grad_check`], but probes a separate `numeric` graph with finite
/// differences under the given stencil. Used where the analytic graph
/// contains a surrogate-gradient node (straight-through): `numeric` spells
/// out the surrogate function with ordinary ops so its true derivative
/// equals the surrogate gradient.
pub fn grad_check_with<A, N>(
    params: &[Tensor],
    tolerance: f64,
    stencil: Stencil,
    analytic: A,
    numeric: N,
) -> Result<GradCheckReport>
where
    A: Fn(&mut Tape, &[Var]) -> Result<Var>,
    N: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = numeric(&mut tape, &leaves)?;
        let value = tape
            .value(loss)
            .item()
            .ok_or_else(|| Error::Contract("grad_check builder must return a scalar".into()))?;
        Ok((value, tape.relu_pattern()))
    };

    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = analytic(&mut tape, &leaves)?;
    let grads = tape.backward(loss)?;
    let base_pattern = match stencil {
        Stencil::FivePoint { .. } => eval(params)?.1,
        Stencil::ThreePoint { .. } => Vec::new(),
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut reports = Vec::with_capacity(params.len());
    for (leaf, var) in leaves.iter().enumerate() {
        let analytic = grads.get(*var).clone();
        let mut worst = LeafReport {
            leaf,
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for j in 0..params[leaf].len() {
            let orig = params[leaf].data()[j];
            let mut probe = |offset: f64| -> Result<(f64, Vec<bool>)> {
                work[leaf].data_mut()[j] = orig + offset;
                let out = eval(&work);
                work[leaf].data_mut()[j] = orig;
                out
            };
            let numeric = match stencil {
                Stencil::ThreePoint { step } => (probe(step)?.0 - probe(-step)?.0) / (2.0 * step),
                Stencil::FivePoint { step, min_step } => {
                    let mut h = step;
                    loop {
                        let pts = [probe(-2.0 * h)?, probe(-h)?, probe(h)?, probe(2.0 * h)?];
                        let smooth = pts.iter().all(|(_, p)| *p == base_pattern);
                        if smooth || h / 2.0 < min_step {
                            break (8.0 * (pts[2].0 - pts[1].0) - (pts[3].0 - pts[0].0)) / (12.0 * h);
                        }
                        h /= 2.0;
                    }
                }
            };
            let a = analytic.data()[j];
            let err = relative_error(a, numeric);
            if err > worst.max_rel_err {
                worst = LeafReport {
                    leaf,
                    max_rel_err: err,
                    worst_index: j,
                    analytic: a,
                    numeric,
                };
            }
        }
        reports.push(worst);
    }
    Ok(GradCheckReport {
        leaves: reports,
        tolerance,
    })
}
