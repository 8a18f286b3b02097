//! Dense row-major tensors of rank 1 to 3 and the value-level kernels used by
//! the tape. A rank-1 tensor of length `d` is treated as a `1 x d` matrix by
//! the matrix kernels.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Added to the mean of squares before the square root in [`rms_norm`].
pub const RMS_EPS: f64 = 1e-6;
/// Added to the norm product in [`cosine_similarity`].
pub const COS_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], values: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::Rank {
                op: "tensor",
                expected: "rank 1 to 3",
                shape: shape.to_vec(),
            });
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::dim("tensor", shape, &[values.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![v; n]).expect("full: shape must have rank 1 to 3")
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn vector(values: Vec<T>) -> Self {
        Tensor {
            shape: vec![values.len()],
            values,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<T>) -> Result<Self> {
        Self::new(&[rows, cols], values)
    }

    /// Builds a matrix from `f64` rows; handy in tests.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::DegenerateInput("ragged rows"));
        }
        let values = rows.iter().flat_map(|r| r.iter().map(|&v| T::lit(v))).collect();
        Self::new(&[rows.len(), cols], values)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.values[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Row count when viewed as a matrix (all leading dimensions folded).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.values.len() / self.cols().max(1),
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor rank >= 1")
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.values[r * self.cols() + c]
    }

    /// First element; the value of a scalar tensor.
    pub fn item(&self) -> T {
        self.values[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Turns gradient tracking on or off; turning it on allocates a zeroed
    /// gradient buffer of the same shape.
    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if on && self.grad.is_none() {
            self.grad = Some(vec![T::zero(); self.values.len()]);
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub(crate) fn grad_mut(&mut self) -> &mut [T] {
        let n = self.values.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); n])
    }

    pub fn accumulate_grad(&mut self, g: &[T]) {
        debug_assert_eq!(g.len(), self.values.len());
        for (acc, &v) in self.grad_mut().iter_mut().zip(g) {
            *acc += v;
        }
    }

    /// Copy of the values with no gradient state attached.
    pub fn detached(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.clone(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub(crate) fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.len() {
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            _ => Err(Error::Rank {
                op,
                expected: "rank 1 or 2",
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.as_f64()).collect()
    }
}

// ---------------------------------------------------------------------------
// Kernels on raw slices. Shapes are checked by the callers.

/// `out += a[p x q] * b[q x r]`.
pub(crate) fn matmul_acc<T: Scalar>(a: &[T], b: &[T], p: usize, q: usize, r: usize, out: &mut [T]) {
    for i in 0..p {
        let out_row = &mut out[i * r..(i + 1) * r];
        let a_row = &a[i * q..(i + 1) * q];
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = &b[k * r..(k + 1) * r];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// `out[p x q] += g[p x r] * b[q x r]^T`.
pub(crate) fn matmul_nt_acc<T: Scalar>(g: &[T], b: &[T], p: usize, q: usize, r: usize, out: &mut [T]) {
    for i in 0..p {
        let g_row = &g[i * r..(i + 1) * r];
        for k in 0..q {
            let b_row = &b[k * r..(k + 1) * r];
            let mut acc = T::zero();
            for (&x, &y) in g_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * q + k] += acc;
        }
    }
}

/// `out[q x r] += a[p x q]^T * g[p x r]`.
pub(crate) fn matmul_tn_acc<T: Scalar>(a: &[T], g: &[T], p: usize, q: usize, r: usize, out: &mut [T]) {
    for i in 0..p {
        let g_row = &g[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            let out_row = &mut out[k * r..(k + 1) * r];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += aik * gv;
            }
        }
    }
}

pub(crate) fn transpose_values<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// Row softmax with max subtraction. Entries whose mask bit is false get
/// probability zero; a row with every entry masked is left all zero.
pub(crate) fn softmax_rows_kernel<T: Scalar>(x: &[T], cols: usize, mask: Option<&[bool]>) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (r, (row, out_row)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let allowed = |j: usize| mask.is_none_or(|m| m[r * cols + j]);
        let mut max = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if allowed(j) && v > max {
                max = v;
            }
        }
        if max == T::neg_infinity() {
            continue;
        }
        let mut sum = T::zero();
        for (j, (&v, o)) in row.iter().zip(out_row.iter_mut()).enumerate() {
            if allowed(j) {
                *o = (v - max).exp();
                sum += *o;
            }
        }
        let inv = T::one() / sum;
        out_row.iter_mut().for_each(|o| *o *= inv);
    }
    out
}

pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let inner = c * (x + T::lit(0.044715) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

pub(crate) fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let half = T::lit(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}

/// Per-row inverse RMS, `1 / sqrt(mean(x^2) + eps)`.
pub(crate) fn inv_rms_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let d = T::lit(cols as f64);
    x.chunks(cols)
        .map(|row| {
            let ms = row.iter().map(|&v| v * v).sum::<T>() / d;
            T::one() / (ms + T::lit(RMS_EPS)).sqrt()
        })
        .collect()
}

pub(crate) fn dot<T: Scalar>(u: &[T], v: &[T]) -> T {
    u.iter().zip(v).map(|(&a, &b)| a * b).sum()
}

pub(crate) fn norm<T: Scalar>(u: &[T]) -> T {
    dot(u, u).sqrt()
}

// ---------------------------------------------------------------------------
// Value-level operations.

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (p, q) = a.matrix_dims("matmul")?;
    let (q2, r) = b.matrix_dims("matmul")?;
    if q != q2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); p * r];
    matmul_acc(a.values(), b.values(), p, q, r, &mut out);
    Tensor::matrix(p, r, out)
}

pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let values = softmax_rows_kernel(x.values(), x.cols(), None);
    Tensor::new(x.shape(), values).expect("same shape")
}

pub fn rms_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.cols();
    if gain.len() != d {
        return Err(Error::dim("rms_norm", x.shape(), gain.shape()));
    }
    let inv = inv_rms_rows(x.values(), d);
    let mut out = x.values().to_vec();
    for (row, &s) in out.chunks_mut(d).zip(&inv) {
        for (v, &g) in row.iter_mut().zip(gain.values()) {
            *v = *v * s * g;
        }
    }
    Tensor::new(x.shape(), out)
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let values = x.values().iter().map(|&v| gelu_scalar(v)).collect();
    Tensor::new(x.shape(), values).expect("same shape")
}

/// Cosine similarity `u.v / max(|u||v|, eps)`, clamped to `[-1, 1]`. Two
/// vectors that are both numerically zero count as identical (`1.0`).
pub fn cosine_similarity<T: Scalar>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(Error::dim("cosine_similarity", &[u.len()], &[v.len()]));
    }
    if u.is_empty() {
        return Err(Error::DegenerateInput("cosine_similarity needs d >= 1"));
    }
    Ok(cosine_parts(u, v).0)
}

/// Returns `(clamped cosine, dot, |u|, |v|, degenerate-or-clamped flag)`.
pub(crate) fn cosine_parts<T: Scalar>(u: &[T], v: &[T]) -> (T, T, T, T, bool) {
    let eps = T::lit(COS_EPS);
    let nu = norm(u);
    let nv = norm(v);
    if nu < eps && nv < eps {
        return (T::one(), T::zero(), nu, nv, true);
    }
    let d = dot(u, v);
    let c = d / (nu * nv).max(eps);
    if c > T::one() {
        (T::one(), d, nu, nv, true)
    } else if c < -T::one() {
        (-T::one(), d, nu, nv, true)
    } else {
        (c, d, nu, nv, false)
    }
}
