//! Dense row-major `f64` tensors and the handful of kernels the MLP needs.
//!
//! Every reduction runs in a fixed order, so equal inputs give bit-equal
//! outputs regardless of call site. Matrix products accumulate each output
//! element over the inner index in increasing order, which makes them agree
//! exactly with a naive triple loop.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(&[rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading extent of a matrix; a vector counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.matrix_dims("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(&[c, r], out)
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![indices.len(), c],
            data,
        }
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!(
                "{context} (element {i} = {})",
                self.data[i]
            ))),
        }
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |acc, (a, b)| acc + a * b)
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (s, o) in self.data.iter_mut().zip(&other.data) {
            *s += alpha * o;
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (s, o) in self.data.iter_mut().zip(&other.data) {
            *s += o;
        }
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "hadamard")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a * b)
                .collect(),
        })
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
///
/// Each `c[i][j]` receives its `k` products in increasing `p` order. Tiling
/// only regroups rows, columns and inner-index ranges, never the per-element
/// order.
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    const K_BLOCK: usize = 256;
    let mut panel = Vec::with_capacity(K_BLOCK * NR);
    let mut k0 = 0;
    while k0 < k {
        let k1 = (k0 + K_BLOCK).min(k);
        let mut j = 0;
        while j < n {
            let cols = NR.min(n - j);
            if cols == NR {
                panel.clear();
                for p in k0..k1 {
                    panel.extend_from_slice(&b[p * n + j..p * n + j + NR]);
                }
            }
            let mut i = 0;
            while i < m {
                let rows = MR.min(m - i);
                if rows == MR && cols == NR {
                    tile(a, &panel, c, (i, j), (k0, k1), k, n);
                } else {
                    for r in i..i + rows {
                        for col in j..j + cols {
                            let mut acc = c[r * n + col];
                            for p in k0..k1 {
                                acc += a[r * k + p] * b[p * n + col];
                            }
                            c[r * n + col] = acc;
                        }
                    }
                }
                i += MR;
            }
            j += NR;
        }
        k0 = k1;
    }
}

const MR: usize = 4;
const NR: usize = 8;

/// One `MR × NR` block of `c`, held in registers over `p ∈ [k0, k1)`.
/// `panel` holds rows `k0..k1` of the block's `NR` columns of `b`.
#[inline(always)]
fn tile(
    a: &[f64],
    panel: &[f64],
    c: &mut [f64],
    (i, j): (usize, usize),
    (k0, k1): (usize, usize),
    k: usize,
    n: usize,
) {
    let mut acc = [[0.0f64; NR]; MR];
    for (r, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + NR]);
    }
    let a_rows: [&[f64]; MR] =
        core::array::from_fn(|r| &a[(i + r) * k + k0..(i + r) * k + k1]);
    for (q, bv) in panel.chunks_exact(NR).enumerate() {
        for (row, a_row) in acc.iter_mut().zip(&a_rows) {
            let av = a_row[q];
            for (x, &bb) in row.iter_mut().zip(bv) {
                *x += av * bb;
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.matrix_dims("matmul")?;
    let (k2, n) = b.matrix_dims("matmul")?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut c = vec![0.0; m * n];
    gemm_acc(&a.data, &b.data, &mut c, m, k, n);
    Tensor::new(&[m, n], c)
}

/// `aᵀ · b`
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rows() != b.rows() || a.shape.len() != 2 {
        return Err(Error::Shape {
            op: "matmul_tn",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    matmul(&a.transpose()?, b)
}

/// `a · bᵀ`
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.cols() || b.shape.len() != 2 {
        return Err(Error::Shape {
            op: "matmul_nt",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    matmul(a, &b.transpose()?)
}

/// Adds a length-`cols` vector to every row.
pub fn add_row_vector(x: &mut Tensor, v: &Tensor) -> Result<()> {
    if x.cols() != v.len() {
        return Err(Error::Shape {
            op: "add_row_vector",
            lhs: x.shape.clone(),
            rhs: v.shape.clone(),
        });
    }
    let c = x.cols();
    for row in x.data.chunks_exact_mut(c) {
        for (r, b) in row.iter_mut().zip(&v.data) {
            *r += b;
        }
    }
    Ok(())
}

pub fn column_sums(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = vec![0.0; c];
    for row in x.data.chunks_exact(c) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::vector(out)
}

pub fn column_means(x: &Tensor) -> Tensor {
    let mut s = column_sums(x);
    s.scale(1.0 / x.rows() as f64);
    s
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
    }
}

/// Upstream gradient masked by `x > 0`; the subgradient at zero is zero.
pub fn relu_backward(x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    x.same_shape(upstream, "relu_backward")?;
    Ok(Tensor {
        shape: x.shape.clone(),
        data: x
            .data
            .iter()
            .zip(&upstream.data)
            .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
            .collect(),
    })
}

/// Row-wise softmax with the row maximum subtracted first.
pub fn softmax(logits: &Tensor) -> Tensor {
    let c = logits.cols();
    let mut out = logits.clone();
    for row in out.data.chunks_exact_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - max);
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean cross-entropy over the batch and its gradient `(softmax − onehot) / batch`.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (batch, classes) = logits.matrix_dims("softmax_xent")?;
    if batch == 0 || labels.len() != batch {
        return Err(Error::Input(format!(
            "softmax_xent: {} labels for batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Input(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let inv_batch = 1.0 / batch as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (row, &y) in grad.data.chunks_exact_mut(classes).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let shifted_y = row[y] - max;
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - max);
            sum += *v;
        }
        loss -= shifted_y - libm::log(sum);
        for v in row.iter_mut() {
            *v = *v / sum * inv_batch;
        }
        row[y] -= inv_batch;
    }
    Ok((loss * inv_batch, grad))
}

/// Converts one-hot rows into class indices.
pub fn labels_from_one_hot(one_hot: &Tensor) -> Result<Vec<usize>> {
    let c = one_hot.cols();
    one_hot
        .data
        .chunks_exact(c)
        .map(|row| {
            let hot: Vec<usize> = (0..c).filter(|&j| row[j] == 1.0).collect();
            match hot.as_slice() {
                [j] if row.iter().sum::<f64>() == 1.0 => Ok(*j),
                _ => Err(Error::Input("row is not one-hot".into())),
            }
        })
        .collect()
}
