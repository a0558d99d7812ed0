use alloc::vec;
use alloc::vec::Vec;

use super::{dot, Matrix};
use crate::error::{Error, Result};

/// Sweep cap for the Jacobi iteration.
pub const MAX_SWEEPS: usize = 80;

/// Thin SVD `a = u · diag(singular_values) · vt` with `r = min(m, n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    /// m×r, orthonormal columns.
    pub u: Matrix,
    /// Length r, nonincreasing, nonnegative.
    pub singular_values: Vec<f64>,
    /// r×n, orthonormal rows.
    pub vt: Matrix,
}

impl SvdFactors {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (k, s) in self.singular_values.iter().enumerate() {
                us[(i, k)] *= s;
            }
        }
        us.matmul_unchecked(&self.vt)
    }

    /// Number of singular values above `rel_tol · s_max`.
    pub fn rank(&self, rel_tol: f64) -> usize {
        let s_max = self.singular_values.first().copied().unwrap_or(0.0);
        self.singular_values.iter().filter(|&&s| s > rel_tol * s_max && s > 0.0).count()
    }
}

/// Singular value decomposition by one-sided (Hestenes) Jacobi rotations.
///
/// Deterministic: the pair sweep order is fixed and ties in the final sort
/// are broken by column index.
pub fn svd(a: &Matrix) -> Result<SvdFactors> {
    if !a.is_finite() {
        return Err(Error::numerical("svd", "input has non-finite entries"));
    }
    let (m, n) = a.shape();
    if m >= n {
        jacobi_tall(a)
    } else {
        let t = jacobi_tall(&a.transpose())?;
        Ok(SvdFactors { u: t.vt.transpose(), singular_values: t.singular_values, vt: t.u.transpose() })
    }
}

fn jacobi_tall(a: &Matrix) -> Result<SvdFactors> {
    let (m, n) = a.shape();
    // column-major working copies
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a[(i, j)]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut c = vec![0.0; n];
            c[j] = 1.0;
            c
        })
        .collect();

    let tol = f64::EPSILON * (m.max(1) as f64);
    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = dot(&cols[p], &cols[q]);
                if gamma.abs() <= tol * libm::sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + libm::sqrt(1.0 + zeta * zeta));
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::numerical(
            "svd",
            alloc::format!("Jacobi iteration did not converge in {MAX_SWEEPS} sweeps for a {m}x{n} matrix"),
        ));
    }

    let norms: Vec<f64> = cols.iter().map(|c| libm::sqrt(dot(c, c))).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let s_max = norms.iter().copied().fold(0.0, f64::max);
    let keep_tol = s_max * 1e-10;

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut needs_completion = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let s = norms[j];
        if s > keep_tol && s > 0.0 {
            u_cols.push(cols[j].iter().map(|x| x / s).collect());
        } else {
            u_cols.push(vec![0.0; m]);
            needs_completion.push(k);
        }
    }
    complete_orthonormal(&mut u_cols, &needs_completion, m);

    let singular_values: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let u = Matrix::from_fn(m, n, |i, k| u_cols[k][i]);
    let vt = Matrix::from_fn(n, n, |k, i| v[order[k]][i]);
    Ok(SvdFactors { u, singular_values, vt })
}

#[inline]
fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fills the listed columns with unit vectors orthogonal to every other
/// column, drawing candidates from the standard basis.
fn complete_orthonormal(u_cols: &mut [Vec<f64>], slots: &[usize], m: usize) {
    let mut basis_idx = 0;
    for &slot in slots {
        loop {
            assert!(basis_idx < m, "orthonormal completion ran out of basis vectors");
            let mut cand = vec![0.0; m];
            cand[basis_idx] = 1.0;
            basis_idx += 1;
            // two passes of modified Gram-Schmidt
            for _ in 0..2 {
                for (k, col) in u_cols.iter().enumerate() {
                    if k == slot || (slots.contains(&k) && col.iter().all(|&x| x == 0.0)) {
                        continue;
                    }
                    let d = dot(&cand, col);
                    for (c, x) in cand.iter_mut().zip(col) {
                        *c -= d * x;
                    }
                }
            }
            let norm = libm::sqrt(dot(&cand, &cand));
            if norm > 1e-6 {
                u_cols[slot] = cand.into_iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}
