//! Reverse-mode tape.
//!
//! Every operation appends a node holding its forward value; nodes only
//! reference earlier nodes, so the tape is already in topological order and
//! `backward` is a single reverse sweep.

use std::ops::Range;

use super::tensor::{bget, broadcast_shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Sqrt(Var),
    MeanRows(Var),
    MeanCols(Var),
    SoftmaxRows(Var),
    Column(Var, usize),
    /// Mean softmax cross-entropy; caches the softmax probabilities.
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
    /// `m ⊙ mask` forward; backward routes `up ⊙ mask` to `m` and `up ⊙ m` to `g`.
    StraightThrough {
        m: Var,
        g: Var,
        mask: Vec<bool>,
    },
    /// Scales each block of a flat `1 × d` vector by one gate entry.
    BlockScale {
        theta: Var,
        gates: Var,
        ranges: Vec<Range<usize>>,
    },
    /// Views `rows × cols` consecutive entries of a `1 × d` vector as a matrix.
    Slice {
        src: Var,
        start: usize,
    },
    Transpose(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Parameters and constant inputs are both leaves; a
    /// constant simply has its gradient ignored.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Sign pattern of every relu input on the tape, so callers can tell
    /// whether two evaluations sit on the same smooth piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(a),
                _ => None,
            })
            .flat_map(|a| self.value(a).data().iter().map(|v| *v > 0.0))
            .collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, w) = (self.value(a), self.value(b));
        if x.cols() != w.rows() {
            return Err(Error::dim(
                "matmul",
                format!("{}x{} · {}x{}", x.rows(), x.cols(), w.rows(), w.cols()),
            ));
        }
        let (n, k, m) = (x.rows(), x.cols(), w.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let xr = x.row_slice(i);
            let orow = &mut out[i * m..(i + 1) * m];
            for (p, &xv) in xr.iter().enumerate().take(k) {
                if xv == 0.0 {
                    continue;
                }
                for (o, &wv) in orow.iter_mut().zip(w.row_slice(p)) {
                    *o += xv * wv;
                }
            }
        }
        let value = Tensor::new(n, m, out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let (x, y) = (self.value(a), self.value(b));
        let (rows, cols) = broadcast_shape(name, x.shape(), y.shape())?;
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let (p, q) = (bget(x, r, c), bget(y, r, c));
                data.push(match kind {
                    Binary::Add => p + q,
                    Binary::Sub => p - q,
                    Binary::Mul => p * q,
                    Binary::Div => p / q,
                });
            }
        }
        let value = Tensor::new(rows, cols, data)?;
        Ok(self.push(value, Op::Binary(kind, a, b)))
    }

    /// Elementwise sum with broadcasting over unit axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::sqrt);
        self.push(value, Op::Sqrt(a))
    }

    /// Mean over the batch axis: `b × n -> 1 × n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rows() == 0 {
            return Err(Error::EmptyBatch("mean_rows"));
        }
        let summed = x.reduce_to(1, x.cols());
        let n = x.rows() as f64;
        let value = summed.map(|v| v / n);
        Ok(self.push(value, Op::MeanRows(a)))
    }

    /// Mean over the feature axis: `b × n -> b × 1`.
    pub fn mean_cols(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.cols() == 0 {
            return Err(Error::dim("mean_cols", "zero features"));
        }
        let summed = x.reduce_to(x.rows(), 1);
        let n = x.cols() as f64;
        let value = summed.map(|v| v / n);
        Ok(self.push(value, Op::MeanCols(a)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Column `j` of a `b × n` tensor as `b × 1`.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let x = self.value(a);
        if j >= x.cols() {
            return Err(Error::dim("column", format!("column {j} of {}", x.cols())));
        }
        let data = (0..x.rows()).map(|r| x.get(r, j)).collect();
        let value = Tensor::new(x.rows(), 1, data)?;
        Ok(self.push(value, Op::Column(a, j)))
    }

    /// Mean cross-entropy of softmax(logits) against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        if z.rows() != labels.len() {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("{} rows vs {} labels", z.rows(), labels.len()),
            ));
        }
        if z.rows() == 0 {
            return Err(Error::EmptyBatch("softmax_cross_entropy"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= z.cols()) {
            return Err(Error::Domain(format!(
                "label {bad} out of range for {} classes",
                z.cols()
            )));
        }
        let probs = softmax_rows(z);
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = z.row_slice(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
        }
        loss /= labels.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Straight-through combination: forward `m ⊙ mask`, with the binary
    /// mask replaced by the differentiable `g` in the backward pass.
    pub fn straight_through(&mut self, m: Var, g: Var, mask: &[bool]) -> Result<Var> {
        let (mv, gv) = (self.value(m), self.value(g));
        if mv.shape() != gv.shape() || mv.len() != mask.len() {
            return Err(Error::dim(
                "straight_through",
                format!("m {:?}, g {:?}, mask {}", mv.shape(), gv.shape(), mask.len()),
            ));
        }
        let value = Tensor::new(
            mv.rows(),
            mv.cols(),
            mv.data()
                .iter()
                .zip(mask)
                .map(|(&v, &keep)| if keep { v } else { 0.0 })
                .collect(),
        )?;
        Ok(self.push(
            value,
            Op::StraightThrough {
                m,
                g,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Multiplies every entry of block `l` of a flat `1 × d` vector by `gates[l]`.
    pub fn block_scale(&mut self, theta: Var, gates: Var, ranges: &[Range<usize>]) -> Result<Var> {
        let (t, g) = (self.value(theta), self.value(gates));
        if t.rows() != 1 || g.rows() != 1 || g.cols() != ranges.len() {
            return Err(Error::dim(
                "block_scale",
                format!("theta {:?}, gates {:?}, {} blocks", t.shape(), g.shape(), ranges.len()),
            ));
        }
        if ranges.iter().any(|r| r.end > t.cols()) {
            return Err(Error::dim("block_scale", "block range exceeds parameter vector"));
        }
        let mut data = t.data().to_vec();
        for (range, &scale) in ranges.iter().zip(g.data()) {
            for v in &mut data[range.clone()] {
                *v *= scale;
            }
        }
        let value = Tensor::row(data);
        Ok(self.push(
            value,
            Op::BlockScale {
                theta,
                gates,
                ranges: ranges.to_vec(),
            },
        ))
    }

    /// Views `rows * cols` entries of a flat vector, starting at `start`, as a matrix.
    pub fn slice(&mut self, src: Var, start: usize, rows: usize, cols: usize) -> Result<Var> {
        let s = self.value(src);
        if s.rows() != 1 || start + rows * cols > s.cols() {
            return Err(Error::dim(
                "slice",
                format!("{rows}x{cols} at {start} from {:?}", s.shape()),
            ));
        }
        let value = Tensor::new(rows, cols, s.data()[start..start + rows * cols].to_vec())?;
        Ok(self.push(value, Op::Slice { src, start }))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    /// Propagates d(loss)/d(node) back to every node on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(up) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            for (target, g) in self.local_grads(node, &up) {
                accumulate(&mut grads[target.0], g);
            }
            grads[idx] = Some(up);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.unwrap_or_else(|| Tensor::zeros(n.value.rows(), n.value.cols())))
            .collect();
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node, up: &Tensor) -> Vec<(Var, Tensor)> {
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (x, w) = (self.value(*a), self.value(*b));
                let (n, k, m) = (x.rows(), x.cols(), w.cols());
                let mut gx = vec![0.0; n * k];
                let mut gw = vec![0.0; k * m];
                for i in 0..n {
                    let ur = up.row_slice(i);
                    for p in 0..k {
                        let wr = w.row_slice(p);
                        gx[i * k + p] = ur.iter().zip(wr).map(|(u, w)| u * w).sum();
                        let xv = x.get(i, p);
                        for (gwv, &u) in gw[p * m..(p + 1) * m].iter_mut().zip(ur) {
                            *gwv += xv * u;
                        }
                    }
                }
                vec![
                    (*a, Tensor::new(n, k, gx).expect("shape")),
                    (*b, Tensor::new(k, m, gw).expect("shape")),
                ]
            }
            Op::Binary(kind, a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (rows, cols) = up.shape();
                let mut gx = Tensor::zeros(rows, cols);
                let mut gy = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        let u = up.get(r, c);
                        let (p, q) = (bget(x, r, c), bget(y, r, c));
                        let (dp, dq) = match kind {
                            Binary::Add => (u, u),
                            Binary::Sub => (u, -u),
                            Binary::Mul => (u * q, u * p),
                            Binary::Div => (u / q, -u * p / (q * q)),
                        };
                        gx.data_mut()[r * cols + c] = dp;
                        gy.data_mut()[r * cols + c] = dq;
                    }
                }
                vec![
                    (*a, gx.reduce_to(x.rows(), x.cols())),
                    (*b, gy.reduce_to(y.rows(), y.cols())),
                ]
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let g = zip_map(up, x, |u, v| if v > 0.0 { u } else { 0.0 });
                vec![(*a, g)]
            }
            Op::Sigmoid(a) => {
                let g = zip_map(up, &node.value, |u, s| u * s * (1.0 - s));
                vec![(*a, g)]
            }
            Op::Sqrt(a) => {
                let g = zip_map(up, &node.value, |u, s| 0.5 * u / s);
                vec![(*a, g)]
            }
            Op::MeanRows(a) => {
                let x = self.value(*a);
                let n = x.rows() as f64;
                let mut g = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    for c in 0..x.cols() {
                        g.data_mut()[r * x.cols() + c] = up.get(0, c) / n;
                    }
                }
                vec![(*a, g)]
            }
            Op::MeanCols(a) => {
                let x = self.value(*a);
                let n = x.cols() as f64;
                let mut g = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    for c in 0..x.cols() {
                        g.data_mut()[r * x.cols() + c] = up.get(r, 0) / n;
                    }
                }
                vec![(*a, g)]
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut g = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = up.row_slice(r).iter().zip(y.row_slice(r)).map(|(u, s)| u * s).sum();
                    for c in 0..y.cols() {
                        g.data_mut()[r * y.cols() + c] = y.get(r, c) * (up.get(r, c) - dot);
                    }
                }
                vec![(*a, g)]
            }
            Op::Column(a, j) => {
                let x = self.value(*a);
                let mut g = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    g.data_mut()[r * x.cols() + j] = up.get(r, 0);
                }
                vec![(*a, g)]
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let scale = up.get(0, 0) / labels.len() as f64;
                let mut g = probs.clone();
                let cols = g.cols();
                for (r, &label) in labels.iter().enumerate() {
                    g.data_mut()[r * cols + label] -= 1.0;
                }
                vec![(*logits, g.map(|v| v * scale))]
            }
            Op::StraightThrough { m, g, mask } => {
                let mv = self.value(*m);
                let gm = Tensor::new(
                    up.rows(),
                    up.cols(),
                    up.data()
                        .iter()
                        .zip(mask)
                        .map(|(&u, &keep)| if keep { u } else { 0.0 })
                        .collect(),
                )
                .expect("shape");
                let gg = zip_map(up, mv, |u, v| u * v);
                vec![(*m, gm), (*g, gg)]
            }
            Op::BlockScale { theta, gates, ranges } => {
                let t = self.value(*theta);
                let gv = self.value(*gates);
                let mut gt = up.clone();
                let mut gg = vec![0.0; ranges.len()];
                for (l, range) in ranges.iter().enumerate() {
                    let scale = gv.data()[l];
                    let mut acc = 0.0;
                    for j in range.clone() {
                        acc += t.data()[j] * up.data()[j];
                        gt.data_mut()[j] *= scale;
                    }
                    gg[l] = acc;
                }
                vec![(*theta, gt), (*gates, Tensor::row(gg))]
            }
            Op::Slice { src, start } => {
                let s = self.value(*src);
                let mut g = Tensor::zeros(1, s.cols());
                g.data_mut()[*start..*start + up.len()].copy_from_slice(up.data());
                vec![(*src, g)]
            }
            Op::Transpose(a) => vec![(*a, up.transpose())],
        }
    }
}

/// Gradients of a scalar loss with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> &Tensor {
        &self.grads[v.0]
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.rows(),
        a.cols(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("shape")
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row_slice(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (c, e) in exps.into_iter().enumerate() {
            out.data_mut()[r * x.cols() + c] = e / total;
        }
    }
    out
}
