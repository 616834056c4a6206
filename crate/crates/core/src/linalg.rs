//! Dense kernels shared by the basis, DEIM and bound computations.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{PhError, Result};

pub fn sym_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn skew_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m - m.transpose()) * 0.5
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Extreme eigenvalues of the symmetric part of `m`, as `(min, max)`.
pub fn sym_eig_range(m: &DMatrix<f64>) -> (f64, f64) {
    if m.is_empty() {
        return (0.0, 0.0);
    }
    let ev = sym_part(m).symmetric_eigenvalues();
    (ev.min(), ev.max())
}

/// Thin SVD with singular values sorted in decreasing order.
pub fn sorted_svd(s: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let k = s.nrows().min(s.ncols());
    if k == 0 {
        return (DMatrix::zeros(s.nrows(), 0), DVector::zeros(0));
    }
    let svd = s.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let sv = svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));
    let mut us = DMatrix::zeros(s.nrows(), order.len());
    let mut ss = DVector::zeros(order.len());
    for (dst, &src) in order.iter().enumerate() {
        us.set_column(dst, &u.column(src));
        ss[dst] = sv[src];
    }
    (us, ss)
}

/// Orthonormal basis of the numerical range of `m`: columns with `σ_k > rel_tol·σ_1`.
pub fn orthonormal_range(m: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, usize) {
    let (u, s) = sorted_svd(m);
    if s.is_empty() || s[0] == 0.0 {
        return (DMatrix::zeros(m.nrows(), 0), 0);
    }
    let rank = s.iter().take_while(|&&v| v > rel_tol * s[0]).count();
    (u.columns(0, rank).into_owned(), rank)
}

/// 2-norm condition number; `inf` for singular or empty input.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::INFINITY;
    }
    let s = m.singular_values();
    let min = s.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        s.max() / min
    }
}

pub fn to_complex(m: &DMatrix<f64>) -> DMatrix<Complex64> {
    m.map(|v| Complex64::new(v, 0.0))
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Composite trapezoid rule on a (possibly nonuniform) grid.
pub fn trapezoid(times: &[f64], values: &[f64]) -> f64 {
    debug_assert_eq!(times.len(), values.len());
    times
        .windows(2)
        .zip(values.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum()
}

/// Running trapezoid integral, starting at zero.
pub fn cumulative_trapezoid(times: &[f64], values: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    out.push(0.0);
    for k in 1..values.len() {
        acc += 0.5 * (times[k] - times[k - 1]) * (values[k] + values[k - 1]);
        out.push(acc);
    }
    out
}

/// Invert a small square matrix, rejecting numerically singular input.
pub fn checked_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.clone()
        .try_inverse()
        .filter(|inv| all_finite(inv.as_slice()))
        .ok_or_else(|| PhError::Structural {
            matrix: what.to_string(),
            detail: "matrix is singular".into(),
        })
}
