//! Dense row-major matrices of `f64`.
//!
//! Everything the simulator differentiates is at most rank two (batch ×
//! features), so vectors are stored as `1 × n` rows and scalars as `1 × 1`.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// A `1 × n` row vector.
    pub fn row(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("tensor", "ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a `1 × 1` tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            data.extend((0..self.rows).map(|r| self.data[r * self.cols + c]));
        }
        Tensor {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Sums broadcast axes away so the result has shape `rows × cols`.
    pub(crate) fn reduce_to(&self, rows: usize, cols: usize) -> Tensor {
        if self.shape() == (rows, cols) {
            return self.clone();
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..self.rows {
            let orow = if rows == 1 { 0 } else { r };
            for c in 0..self.cols {
                let ocol = if cols == 1 { 0 } else { c };
                out.data[orow * cols + ocol] += self.data[r * self.cols + c];
            }
        }
        out
    }
}

/// Shape produced by broadcasting two operands; each axis must match or be 1.
pub(crate) fn broadcast_shape(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let axis = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (axis(a.0, b.0), axis(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::dim(
            op,
            format!("cannot broadcast {}x{} with {}x{}", a.0, a.1, b.0, b.1),
        )),
    }
}

/// Reads `t` at output position `(r, c)` under broadcasting.
#[inline]
pub(crate) fn bget(t: &Tensor, r: usize, c: usize) -> f64 {
    let rr = if t.rows == 1 { 0 } else { r };
    let cc = if t.cols == 1 { 0 } else { c };
    t.data[rr * t.cols + cc]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(2, 3, vec![0.0; 5]).is_err());
        assert_eq!(Tensor::new(2, 3, vec![0.0; 6]).unwrap().shape(), (2, 3));
    }

    #[test]
    fn reduce_sums_broadcast_axes() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(t.reduce_to(1, 2).data(), &[4.0, 6.0]);
        assert_eq!(t.reduce_to(2, 1).data(), &[3.0, 7.0]);
        assert_eq!(t.reduce_to(1, 1).data(), &[10.0]);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape("t", (4, 3), (1, 3)).unwrap(), (4, 3));
        assert_eq!(broadcast_shape("t", (1, 3), (4, 1)).unwrap(), (4, 3));
        assert!(broadcast_shape("t", (4, 3), (2, 3)).is_err());
    }
}
