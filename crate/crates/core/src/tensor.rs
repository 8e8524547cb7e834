//! Small dense linear algebra on row-major buffers.
//!
//! Everything downstream (update rules, attention oracles, the language
//! model) is built on these two containers. Summation order is pinned:
//! `matvec` accumulates in ascending column order so that double-precision
//! results are bit-for-bit reproducible against a naive scalar loop. The
//! `*_into` helpers used by model hot paths use a fixed 8-lane blocked
//! order instead; that order is also deterministic, just not the naive one.

use crate::error::{Error, Result};
use crate::real::{elu1, relu, sigmoid, Real};

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// Dense vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Vector<T> {
    data: Vec<T>,
}

/// Pointwise binary operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Mul,
    Add,
    Sub,
}

/// Pointwise unary operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Sigmoid,
    Relu,
    Elu1,
    Exp,
}

#[inline]
fn apply_unary<T: Real>(op: UnaryOp, x: T) -> T {
    match op {
        UnaryOp::Sigmoid => sigmoid(x),
        UnaryOp::Relu => relu(x),
        UnaryOp::Elu1 => elu1(x),
        UnaryOp::Exp => x.exp(),
    }
}

#[inline]
fn apply_binary<T: Real>(op: BinaryOp, a: T, b: T) -> T {
    match op {
        BinaryOp::Mul => a * b,
        BinaryOp::Add => a + b,
        BinaryOp::Sub => a - b,
    }
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimMismatch(format!(
                "matrix data length {} != {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Build from nested rows; rows must have equal length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::DimMismatch("ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: r, cols: c, data })
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
    pub fn data(&self) -> &[T] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }
    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }
    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// y = A x with ascending-column accumulation per row.
    pub fn matvec(&self, x: &Vector<T>) -> Result<Vector<T>> {
        if self.cols != x.len() {
            return Err(Error::DimMismatch(format!(
                "matvec: {}x{} with vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        let mut out = Vec::with_capacity(self.rows);
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = T::zero();
            for j in 0..self.cols {
                acc = acc + row[j] * x.data[j];
            }
            out.push(acc);
        }
        Ok(Vector { data: out })
    }

    /// y = A^T x with ascending-row accumulation per output coordinate.
    pub fn matvec_transpose(&self, x: &Vector<T>) -> Result<Vector<T>> {
        if self.rows != x.len() {
            return Err(Error::DimMismatch(format!(
                "matvec_transpose: {}x{} with vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        let mut out = vec![T::zero(); self.cols];
        for r in 0..self.rows {
            let row = self.row(r);
            let xr = x.data[r];
            for j in 0..self.cols {
                out[j] = out[j] + xr * row[j];
            }
        }
        Ok(Vector { data: out })
    }

    /// Fast y = A x into a caller buffer (blocked dot; deterministic fixed order).
    pub fn matvec_into(&self, x: &[T], out: &mut [T]) {
        assert_eq!(self.cols, x.len(), "matvec_into: column/len mismatch");
        assert_eq!(self.rows, out.len(), "matvec_into: row/out mismatch");
        for r in 0..self.rows {
            out[r] = dot(self.row(r), x);
        }
    }

    /// Fast out += A^T x, accumulating row-by-row (row-contiguous AXPY).
    pub fn matvec_transpose_add_into(&self, x: &[T], out: &mut [T]) {
        assert_eq!(self.rows, x.len(), "matvec_transpose_add_into: rows/len");
        assert_eq!(self.cols, out.len(), "matvec_transpose_add_into: cols/out");
        for r in 0..self.rows {
            let row = self.row(r);
            let xr = x[r];
            for j in 0..self.cols {
                out[j] = out[j] + xr * row[j];
            }
        }
    }

    /// self += scale * (u ⊗ w).
    pub fn add_outer(&mut self, u: &[T], w: &[T], scale: T) {
        assert_eq!(self.rows, u.len(), "add_outer: rows/u");
        assert_eq!(self.cols, w.len(), "add_outer: cols/w");
        for r in 0..self.rows {
            let s = scale * u[r];
            let row = self.row_mut(r);
            for j in 0..row.len() {
                row[j] = row[j] + s * w[j];
            }
        }
    }

    pub fn scale_in_place(&mut self, s: T) {
        for v in &mut self.data {
            *v = *v * s;
        }
    }

    pub fn add_in_place(&mut self, other: &Matrix<T>) {
        assert_eq!(self.data.len(), other.data.len(), "add_in_place shape");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + *b;
        }
    }

    pub fn elementwise_unary(&self, op: UnaryOp) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| apply_unary(op, v)).collect(),
        }
    }

    pub fn elementwise_binary(&self, op: BinaryOp, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimMismatch(format!(
                "elementwise: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| apply_binary(op, a, b))
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute entry difference; matrices must be congruent.
    pub fn max_abs_diff(&self, other: &Matrix<T>) -> T {
        assert_eq!(self.data.len(), other.data.len(), "max_abs_diff shape");
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }
}

impl<T: Real> Vector<T> {
    pub fn zeros(len: usize) -> Self {
        Vector {
            data: vec![T::zero(); len],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Vector { data }
    }

    pub fn from_slice(data: &[T]) -> Self {
        Vector {
            data: data.to_vec(),
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    #[inline]
    pub fn get(&self, i: usize) -> T {
        self.data[i]
    }
    #[inline]
    pub fn set(&mut self, i: usize, v: T) {
        self.data[i] = v;
    }

    /// Ascending-index dot product.
    pub fn dot(&self, other: &Vector<T>) -> Result<T> {
        if self.len() != other.len() {
            return Err(Error::DimMismatch(format!(
                "dot: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        let mut acc = T::zero();
        for i in 0..self.len() {
            acc = acc + self.data[i] * other.data[i];
        }
        Ok(acc)
    }

    /// Ascending-index sum of components.
    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc = acc + v;
        }
        acc
    }

    pub fn add_in_place(&mut self, other: &Vector<T>) {
        assert_eq!(self.len(), other.len(), "add_in_place length");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + *b;
        }
    }

    pub fn sub_in_place(&mut self, other: &Vector<T>) {
        assert_eq!(self.len(), other.len(), "sub_in_place length");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a - *b;
        }
    }

    pub fn scale_in_place(&mut self, s: T) {
        for v in &mut self.data {
            *v = *v * s;
        }
    }

    pub fn elementwise_unary(&self, op: UnaryOp) -> Vector<T> {
        Vector {
            data: self.data.iter().map(|&v| apply_unary(op, v)).collect(),
        }
    }

    pub fn elementwise_binary(&self, op: BinaryOp, other: &Vector<T>) -> Result<Vector<T>> {
        if self.len() != other.len() {
            return Err(Error::DimMismatch(format!(
                "elementwise: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(Vector {
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| apply_binary(op, a, b))
                .collect(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Vector<T>) -> T {
        assert_eq!(self.len(), other.len(), "max_abs_diff length");
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}

/// M_ij = u_i w_j.
pub fn outer<T: Real>(u: &Vector<T>, w: &Vector<T>) -> Matrix<T> {
    let mut m = Matrix::zeros(u.len(), w.len());
    m.add_outer(u.data(), w.data(), T::one());
    m
}

/// Numerically stable softmax: subtracts the max before exponentiating.
pub fn softmax<T: Real>(x: &Vector<T>) -> Vector<T> {
    let mut out = vec![T::zero(); x.len()];
    softmax_into(x.data(), &mut out);
    Vector { data: out }
}

/// Slice form of [`softmax`] used by attention inner loops.
pub fn softmax_into<T: Real>(x: &[T], out: &mut [T]) {
    assert_eq!(x.len(), out.len(), "softmax_into length");
    if x.is_empty() {
        return;
    }
    let mut mx = x[0];
    for &v in &x[1..] {
        mx = mx.max(v);
    }
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        let e = (v - mx).exp();
        *o = e;
        total = total + e;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

/// Blocked dot product: 8 independent accumulator lanes plus a sequential
/// tail, reduced in a fixed tree. Order is deterministic but differs from
/// the ascending-index order of [`Matrix::matvec`].
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 8;
    let mut acc = [T::zero(); 8];
    for c in 0..chunks {
        let off = c * 8;
        for l in 0..8 {
            acc[l] = acc[l] + a[off + l] * b[off + l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..n {
        tail = tail + a[i] * b[i];
    }
    let s01 = acc[0] + acc[1];
    let s23 = acc[2] + acc[3];
    let s45 = acc[4] + acc[5];
    let s67 = acc[6] + acc[7];
    ((s01 + s23) + (s45 + s67)) + tail
}

/// out += s * a.
#[inline]
pub fn axpy<T: Real>(out: &mut [T], s: T, a: &[T]) {
    debug_assert_eq!(out.len(), a.len());
    for i in 0..out.len() {
        out[i] = out[i] + s * a[i];
    }
}
