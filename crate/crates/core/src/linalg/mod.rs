//! Dense row-major `f64` matrices and the handful of kernels the rest of the
//! crate is built on: SVD, Moore–Penrose pseudo-inverse, similarity matrices
//! and stable reductions.

mod svd;

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Index, IndexMut};

use crate::error::{Error, Result};

pub use svd::{svd, SvdFactors, MAX_SWEEPS};

/// Default relative singular-value cutoff for [`pinv`].
pub const DEFAULT_PINV_RTOL: f64 = 1e-12;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data. Every entry must be finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                alloc::format!("{} entries for a {rows}x{cols} matrix", data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numerical(
                "Matrix::new",
                alloc::format!("non-finite entry at ({}, {})", pos / cols.max(1), pos % cols.max(1)),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Matrix::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    alloc::format!("row {i} has {} entries, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
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

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                alloc::format!("{:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(self.matmul_unchecked(other))
    }

    pub(crate) fn matmul_unchecked(&self, other: &Matrix) -> Matrix {
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Matrix::from_raw(m, n, out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "matmul_nt",
                alloc::format!("{:?} x {:?}ᵀ", self.shape(), other.shape()),
            ));
        }
        Ok(self.matmul_nt_unchecked(other))
    }

    pub(crate) fn matmul_nt_unchecked(&self, other: &Matrix) -> Matrix {
        let (m, n) = (self.rows, other.rows);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let a = self.row(i);
            for j in 0..n {
                out.push(dot(a, other.row(j)));
            }
        }
        Matrix::from_raw(m, n, out)
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "matmul_tn",
                alloc::format!("{:?}ᵀ x {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(self.matmul_tn_unchecked(other))
    }

    pub(crate) fn matmul_tn_unchecked(&self, other: &Matrix) -> Matrix {
        let (k, m, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let a_row = self.row(p);
            let b_row = other.row(p);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Matrix::from_raw(m, n, out)
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, alloc::format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix::from_raw(self.rows, self.cols, data))
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Matrix {
        self.map(|v| v * k)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Rows `indices` of `self`, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix::from_raw(indices.len(), self.cols, data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        libm::sqrt(frobenius_sq(self))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Returns a copy with every row scaled to unit Euclidean norm, or the
    /// index of the first zero row.
    pub fn normalize_rows(&self) -> core::result::Result<Matrix, usize> {
        let mut out = self.clone();
        for i in 0..self.rows {
            let row = out.row_mut(i);
            let n = libm::sqrt(dot(row, row));
            if n == 0.0 || !n.is_finite() {
                return Err(i);
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(out)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// B×d matrix whose rows have unit Euclidean norm (within 1e-8).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix(Matrix);

impl EmbeddingMatrix {
    pub const NORM_TOL: f64 = 1e-8;

    pub fn new(m: Matrix) -> Result<Self> {
        for (i, row) in m.row_iter().enumerate() {
            let n = libm::sqrt(dot(row, row));
            if (n - 1.0).abs() > Self::NORM_TOL {
                return Err(Error::contract(
                    "EmbeddingMatrix::new",
                    alloc::format!("row {i} has norm {n}"),
                ));
            }
        }
        Ok(EmbeddingMatrix(m))
    }

    /// Normalizes every row; fails on a zero row.
    pub fn normalized(m: &Matrix) -> Result<Self> {
        m.normalize_rows().map(EmbeddingMatrix).map_err(|row| Error::DegenerateEmbedding {
            modality: alloc::string::String::from("?"),
            row,
        })
    }

    pub(crate) fn from_normalized_unchecked(m: Matrix) -> Self {
        EmbeddingMatrix(m)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.cols()
    }
}

impl AsRef<Matrix> for EmbeddingMatrix {
    fn as_ref(&self) -> &Matrix {
        &self.0
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Moore–Penrose pseudo-inverse `V·diag(1/sᵢ)·Uᵀ`, dropping singular values at
/// or below `rel_tol · s_max`. A zero matrix maps to the zero matrix of
/// transposed shape.
pub fn pinv(a: &Matrix, rel_tol: f64) -> Result<Matrix> {
    if !(rel_tol > 0.0) {
        return Err(Error::contract("pinv", alloc::format!("rel_tol must be > 0, got {rel_tol}")));
    }
    if !a.is_finite() {
        return Err(Error::numerical("pinv", "input has non-finite entries"));
    }
    let (m, n) = a.shape();
    let f = svd(a)?;
    let s_max = f.singular_values.first().copied().unwrap_or(0.0);
    let mut out = Matrix::zeros(n, m);
    if s_max == 0.0 {
        return Ok(out);
    }
    let cutoff = rel_tol * s_max;
    for (k, &s) in f.singular_values.iter().enumerate() {
        if s <= cutoff {
            // singular values are sorted
            break;
        }
        let inv = 1.0 / s;
        for i in 0..n {
            let v_ik = f.vt[(k, i)] * inv;
            if v_ik == 0.0 {
                continue;
            }
            let out_row = out.row_mut(i);
            for (j, o) in out_row.iter_mut().enumerate() {
                *o += v_ik * f.u[(j, k)];
            }
        }
    }
    Ok(out)
}

/// Pairwise dot products `a·bᵀ` of two embedding matrices. For unit rows these
/// are cosine similarities.
pub fn cosine_sim_matrix(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::shape(
            "cosine_sim_matrix",
            alloc::format!("embedding dims {} vs {}", a.cols(), b.cols()),
        ));
    }
    Ok(a.as_matrix().matmul_nt_unchecked(b.as_matrix()))
}

/// `ln Σ exp(vᵢ)`, shifted by the maximum so large inputs do not overflow.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::contract("log_sum_exp", "empty input"));
    }
    Ok(log_sum_exp_nonempty(values))
}

pub(crate) fn log_sum_exp_nonempty(values: &[f64]) -> f64 {
    if values.len() == 1 {
        return values[0];
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || !max.is_finite() {
        return max;
    }
    let s: f64 = values.iter().map(|&v| libm::exp(v - max)).sum();
    max + libm::log(s)
}

/// Sum of squared entries.
pub fn frobenius_sq(a: &Matrix) -> f64 {
    a.data.iter().map(|v| v * v).sum()
}
