//! The shared dense model: a relu MLP whose parameters live in one flat vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{dense_forward, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// One learnable operator (a weight matrix or a bias vector) inside the flat
/// parameter vector. Weights are stored `out × in`, so a contiguous block of
/// a weight covers whole output units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Operator {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Operator {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    widths: Vec<usize>,
    bias: bool,
    operators: Vec<Operator>,
}

impl ModelSpec {
    /// `widths` is `[input, hidden..., output]`.
    pub fn new(widths: Vec<usize>, bias: bool) -> Result<Self> {
        if widths.len() < 3 {
            return Err(Error::config(
                "model.hidden_widths",
                "at least one hidden layer is required",
            ));
        }
        if widths.contains(&0) {
            return Err(Error::config("model.hidden_widths", "all widths must be >= 1"));
        }
        let mut operators = Vec::new();
        let mut offset = 0;
        for (layer, pair) in widths.windows(2).enumerate() {
            let w = Operator {
                name: format!("fc{layer}.weight"),
                offset,
                rows: pair[1],
                cols: pair[0],
            };
            offset += w.len();
            operators.push(w);
            if bias {
                let b = Operator {
                    name: format!("fc{layer}.bias"),
                    offset,
                    rows: 1,
                    cols: pair[1],
                };
                offset += b.len();
                operators.push(b);
            }
        }
        Ok(Self {
            widths,
            bias,
            operators,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn has_bias(&self) -> bool {
        self.bias
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.widths.last().expect("widths non-empty")
    }

    pub fn operators(&self) -> &[Operator] {
        &self.operators
    }

    /// Total parameter count `d`.
    pub fn n_params(&self) -> usize {
        self.operators.iter().map(Operator::len).sum()
    }

    /// Kaiming-uniform weights (relu gain, fan-in) and zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut data = vec![0.0; self.n_params()];
        for op in &self.operators {
            if op.rows == 1 && op.name.ends_with(".bias") {
                continue;
            }
            let bound = (6.0 / op.cols as f64).sqrt();
            for v in &mut data[op.range()] {
                *v = rng.random_range(-bound..bound);
            }
        }
        ParamVector(data)
    }

    /// Logits for a batch, with `theta` a `1 × d` node holding the flat parameters.
    pub fn forward(&self, tape: &mut Tape, theta: Var, x: Var) -> Result<Var> {
        if tape.value(theta).shape() != (1, self.n_params()) {
            return Err(Error::dim(
                "model.forward",
                format!("theta {:?}, expected 1x{}", tape.value(theta).shape(), self.n_params()),
            ));
        }
        if tape.value(x).cols() != self.input_dim() {
            return Err(Error::dim(
                "model.forward",
                format!(
                    "input has {} features, model expects {}",
                    tape.value(x).cols(),
                    self.input_dim()
                ),
            ));
        }
        let per_layer = if self.bias { 2 } else { 1 };
        let n_layers = self.widths.len() - 1;
        let mut h = x;
        for layer in 0..n_layers {
            let w_op = &self.operators[layer * per_layer];
            let w = tape.slice(theta, w_op.offset, w_op.rows, w_op.cols)?;
            let w = tape.transpose(w);
            let b = if self.bias {
                let b_op = &self.operators[layer * per_layer + 1];
                Some(tape.slice(theta, b_op.offset, 1, b_op.cols)?)
            } else {
                None
            };
            h = dense_forward(tape, h, w, b)?;
            if layer + 1 < n_layers {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// Flat model parameters, laid out operator by operator as in [`ModelSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::row(self.0.clone())
    }

    pub fn count_nonzero(&self) -> usize {
        self.0.iter().filter(|v| **v != 0.0).count()
    }
}

/// Index of the largest logit per row.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row_slice(r);
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn operator_layout_is_contiguous() {
        let spec = ModelSpec::new(vec![16, 32, 5], true).unwrap();
        let ops = spec.operators();
        assert_eq!(ops.len(), 4);
        assert_eq!(spec.n_params(), 16 * 32 + 32 + 32 * 5 + 5);
        for pair in ops.windows(2) {
            assert_eq!(pair[0].range().end, pair[1].offset);
        }
    }

    #[test]
    fn rejects_missing_hidden_layer() {
        assert!(ModelSpec::new(vec![4, 3], true).is_err());
        assert!(ModelSpec::new(vec![4, 0, 3], true).is_err());
    }

    #[test]
    fn forward_shapes() {
        let spec = ModelSpec::new(vec![3, 4, 2], false).unwrap();
        let theta = spec.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::new();
        let t = tape.leaf(theta.to_tensor());
        let x = tape.leaf(Tensor::zeros(5, 3));
        let z = spec.forward(&mut tape, t, x).unwrap();
        assert_eq!(tape.value(z).shape(), (5, 2));
    }
}
