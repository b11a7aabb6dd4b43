//! Dense row-major tensors and the numeric kernels shared by the graph ops
//! and the graph-free analysis routines.
//!
//! Every kernel here has a fixed summation order, so identical inputs always
//! produce bit-identical outputs regardless of which caller invoked it.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense tensor of rank 0, 1 or 2 stored row-major.
///
/// A rank-0 tensor (empty shape) holds a single scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.len() > 2 || shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor shape must have rank <= 2 and positive extents, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dims("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<T>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::Contract("from_rows needs at least one row".into()));
        };
        let cols = first.len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dims("from_rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn from_f64_rows(rows: &[&[f64]]) -> Result<Self> {
        let rows: Vec<Vec<T>> = rows
            .iter()
            .map(|r| r.iter().map(|&v| T::lit(v)).collect())
            .collect();
        Self::from_rows(&rows)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Row count; a vector counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Column count; a vector's length, or 1 for a scalar.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::dims("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    fn require_matrix(&self, op: &'static str) -> Result<()> {
        if self.is_matrix() {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "{op} expects a matrix, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.require_matrix("matmul")?;
        other.require_matrix("matmul")?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::dims("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Self::matrix(m, n, out)
    }

    pub fn transpose(&self) -> Result<Self> {
        self.require_matrix("transpose")?;
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self::matrix(n, m, out)
    }

    /// Element-wise sum. `other` may also be a vector (or 1×n matrix) whose
    /// length equals the column count, in which case it is added to every row.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect();
            return Ok(Tensor {
                shape: self.shape.clone(),
                data,
            });
        }
        if self.is_broadcast_row(other) {
            let c = self.cols();
            let data = self
                .data
                .iter()
                .enumerate()
                .map(|(idx, &a)| a + other.data[idx % c])
                .collect();
            return Ok(Tensor {
                shape: self.shape.clone(),
                data,
            });
        }
        Err(Error::dims("add", &self.shape, &other.shape))
    }

    pub(crate) fn is_broadcast_row(&self, other: &Self) -> bool {
        self.is_matrix() && other.rows() == 1 && other.numel() == self.cols()
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dims("sub", &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    /// ReLU with the subgradient convention relu'(0) = 0.
    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn row_softmax(&self) -> Result<Self> {
        self.masked_row_softmax(None)
    }

    /// Softmax over each row. Columns with `mask[j] == false` receive weight
    /// exactly zero and do not participate in the max or the normaliser.
    pub fn masked_row_softmax(&self, mask: Option<&[bool]>) -> Result<Self> {
        self.require_matrix("row_softmax")?;
        let (m, n) = (self.shape[0], self.shape[1]);
        if let Some(mask) = mask {
            if mask.len() != n {
                return Err(Error::dims("row_softmax mask", &self.shape, &[mask.len()]));
            }
            if !mask.iter().any(|&k| k) {
                return Err(Error::Contract("softmax mask excludes every column".into()));
            }
        }
        let keep = |j: usize| mask.map_or(true, |m| m[j]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let max = (0..n)
                .filter(|&j| keep(j))
                .fold(T::neg_infinity(), |acc, j| acc.max(row[j]));
            let o = &mut out[i * n..(i + 1) * n];
            let mut total = T::zero();
            for j in 0..n {
                if keep(j) {
                    o[j] = (row[j] - max).exp();
                    total += o[j];
                }
            }
            for v in o.iter_mut() {
                *v = *v / total;
            }
        }
        Self::matrix(m, n, out)
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::Contract("concat_rows needs at least one part".into()));
        };
        let cols = first.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            p.require_matrix("concat_rows")?;
            if p.cols() != cols {
                return Err(Error::dims("concat_rows", first.shape(), p.shape()));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Self::matrix(rows, cols, data)
    }

    /// Places matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::Contract("concat_cols needs at least one part".into()));
        };
        let rows = first.rows();
        for p in parts {
            p.require_matrix("concat_cols")?;
            if p.rows() != rows {
                return Err(Error::dims("concat_cols", first.shape(), p.shape()));
            }
        }
        let cols: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Self::matrix(rows, cols, data)
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        self.require_matrix("slice_rows")?;
        if len == 0 || start + len > self.rows() {
            return Err(Error::Length(format!(
                "row slice {start}..{} out of {} rows",
                start + len,
                self.rows()
            )));
        }
        let c = self.cols();
        Self::matrix(len, c, self.data[start * c..(start + len) * c].to_vec())
    }

    /// Gathers the listed rows in order.
    pub fn select_rows(&self, ids: &[usize]) -> Result<Self> {
        self.require_matrix("row_select")?;
        if ids.is_empty() {
            return Err(Error::Length("row_select with no ids".into()));
        }
        let c = self.cols();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= self.rows() {
                return Err(Error::Index {
                    what: "table row",
                    index: id,
                    bound: self.rows(),
                });
            }
            data.extend_from_slice(self.row(id));
        }
        Self::matrix(ids.len(), c, data)
    }

    /// Per-row normalisation to zero mean and unit variance followed by an
    /// affine map. Returns the output together with the normalised rows and
    /// the per-row inverse standard deviations (used by the backward pass).
    pub fn layer_norm(&self, gain: &Self, bias: &Self, eps: T) -> Result<(Self, Self, Vec<T>)> {
        self.require_matrix("layer_norm")?;
        let (m, n) = (self.shape[0], self.shape[1]);
        if gain.numel() != n || bias.numel() != n {
            return Err(Error::dims("layer_norm", &self.shape, gain.shape()));
        }
        let nf = T::from_usize(n).expect("row width fits scalar");
        let mut normed = vec![T::zero(); m * n];
        let mut out = vec![T::zero(); m * n];
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = self.row(i);
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / nf;
            let var = row
                .iter()
                .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                / nf;
            let r = T::one() / (var + eps).sqrt();
            inv_std.push(r);
            for j in 0..n {
                let xh = (row[j] - mean) * r;
                normed[i * n + j] = xh;
                out[i * n + j] = xh * gain.data[j] + bias.data[j];
            }
        }
        Ok((
            Self::matrix(m, n, out)?,
            Self::matrix(m, n, normed)?,
            inv_std,
        ))
    }

    /// Mean over rows of `-log softmax(row)[label]`, plus the row softmax.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<(T, Self)> {
        self.require_matrix("cross_entropy")?;
        let (n, c) = (self.shape[0], self.shape[1]);
        if labels.len() != n {
            return Err(Error::dims("cross_entropy labels", &self.shape, &[labels.len()]));
        }
        let probs = self.row_softmax()?;
        let mut total = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(Error::Index {
                    what: "class label",
                    index: label,
                    bound: c,
                });
            }
            let row = self.row(i);
            let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let lse = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln() + max;
            total += lse - row[label];
        }
        Ok((total / T::from_usize(n).expect("batch fits scalar"), probs))
    }

    /// Index of the largest entry of each row; ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}
