//! Thin helpers over `faer` dense complex matrices.

use faer::{c64, Mat, MatRef, Side};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type CMat = Mat<c64>;

pub fn identity(n: usize) -> CMat {
    Mat::identity(n, n)
}

pub fn scaled(a: MatRef<'_, c64>, s: c64) -> CMat {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] * s)
}

/// Largest entry modulus.
pub fn max_abs(a: MatRef<'_, c64>) -> f64 {
    let mut m = 0.0f64;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            m = m.max(a[(i, j)].norm());
        }
    }
    m
}

pub fn frobenius(a: MatRef<'_, c64>) -> f64 {
    a.norm_l2()
}

/// Maximum entry modulus of `a - b`.
pub fn max_diff(a: MatRef<'_, c64>, b: MatRef<'_, c64>) -> f64 {
    assert_eq!(a.nrows(), b.nrows());
    assert_eq!(a.ncols(), b.ncols());
    let mut m = 0.0f64;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            m = m.max((a[(i, j)] - b[(i, j)]).norm());
        }
    }
    m
}

pub fn singular_values(a: MatRef<'_, c64>) -> Result<Vec<f64>> {
    a.singular_values().map_err(|_| Error::Eigensolver {
        hash: matrix_hash(a),
    })
}

/// Operator 2-norm.
pub fn spectral_norm(a: MatRef<'_, c64>) -> Result<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Ok(0.0);
    }
    Ok(singular_values(a)?[0])
}

/// `‖A - B‖₂`.
pub fn spectral_diff(a: MatRef<'_, c64>, b: MatRef<'_, c64>) -> Result<f64> {
    let d = a - b;
    spectral_norm(d.as_ref())
}

/// `‖U*U − I‖` measured entrywise.
pub fn unitarity_defect(u: MatRef<'_, c64>) -> f64 {
    let g = u.adjoint() * u;
    max_diff(g.as_ref(), identity(u.ncols()).as_ref())
}

/// SHA-256 over the row-major little-endian (re, im) bytes.
pub fn matrix_hash(a: MatRef<'_, c64>) -> String {
    let mut h = Sha256::new();
    h.update((a.nrows() as u64).to_le_bytes());
    h.update((a.ncols() as u64).to_le_bytes());
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            let z = a[(i, j)];
            h.update(z.re.to_le_bytes());
            h.update(z.im.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn hermitian_part(a: MatRef<'_, c64>) -> CMat {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| (a[(i, j)] + a[(j, i)].conj()) * 0.5)
}

/// `f(H)` for Hermitian `H` via its eigendecomposition.
pub fn hermitian_function(h: MatRef<'_, c64>, f: impl Fn(f64) -> f64) -> Result<CMat> {
    let hs = hermitian_part(h);
    let evd = hs
        .self_adjoint_eigen(Side::Lower)
        .map_err(|_| Error::Eigensolver {
            hash: matrix_hash(h),
        })?;
    let u = evd.U();
    let s = evd.S().column_vector();
    let n = h.nrows();
    let fu = Mat::from_fn(n, n, |i, j| u[(i, j)] * f(s[j].re));
    Ok(&fu * u.adjoint())
}

/// Eigenvalues of a Hermitian matrix, ascending.
pub fn hermitian_eigenvalues(h: MatRef<'_, c64>) -> Result<Vec<f64>> {
    let hs = hermitian_part(h);
    hs.self_adjoint_eigenvalues(Side::Lower)
        .map_err(|_| Error::Eigensolver {
            hash: matrix_hash(h),
        })
}

/// `A^k` by repeated squaring.
pub fn power(a: MatRef<'_, c64>, k: usize) -> CMat {
    let n = a.nrows();
    let mut result: Option<CMat> = None;
    let mut base = a.to_owned();
    let mut k = k;
    while k > 0 {
        if k & 1 == 1 {
            result = Some(match result {
                None => base.clone(),
                Some(r) => &r * &base,
            });
        }
        k >>= 1;
        if k > 0 {
            base = &base * &base;
        }
    }
    result.unwrap_or_else(|| identity(n))
}

fn norm_one(a: MatRef<'_, c64>) -> f64 {
    (0..a.ncols())
        .map(|j| (0..a.nrows()).map(|i| a[(i, j)].norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
pub fn expm(a: MatRef<'_, c64>) -> CMat {
    let n = a.nrows();
    let nrm = norm_one(a);
    let s = if nrm > 0.25 {
        (nrm / 0.25).log2().ceil() as u32
    } else {
        0
    };
    let scale = c64::new(0.5f64.powi(s as i32), 0.0);
    let a_s = scaled(a, scale);
    let mut term = identity(n);
    let mut sum = identity(n);
    for k in 1..=30 {
        term = scaled((&term * &a_s).as_ref(), c64::new(1.0 / k as f64, 0.0));
        sum += &term;
        if max_abs(term.as_ref()) <= 1e-18 * max_abs(sum.as_ref()) {
            break;
        }
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    sum
}

/// Eigenvalues of a small dense matrix.
pub fn eigenvalues(a: MatRef<'_, c64>) -> Result<Vec<c64>> {
    a.eigenvalues().map_err(|_| Error::Eigensolver {
        hash: matrix_hash(a),
    })
}

pub fn trace(a: MatRef<'_, c64>) -> c64 {
    (0..a.nrows().min(a.ncols())).map(|i| a[(i, i)]).sum()
}

pub fn vec_norm(v: &[c64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn inner(a: &[c64], b: &[c64]) -> c64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub fn matvec(a: MatRef<'_, c64>, v: &[c64]) -> Vec<c64> {
    let col = Mat::from_fn(v.len(), 1, |i, _| v[i]);
    let r = a * &col;
    (0..r.nrows()).map(|i| r[(i, 0)]).collect()
}

pub fn column(a: MatRef<'_, c64>, j: usize) -> Vec<c64> {
    (0..a.nrows()).map(|i| a[(i, j)]).collect()
}

pub fn from_columns(n: usize, cols: &[Vec<c64>]) -> CMat {
    Mat::from_fn(n, cols.len(), |i, j| cols[j][i])
}

/// `A* v`
pub fn adjoint_matvec(a: MatRef<'_, c64>, v: &[c64]) -> Vec<c64> {
    let col = Mat::from_fn(v.len(), 1, |i, _| v[i]);
    let r = a.adjoint() * &col;
    (0..r.nrows()).map(|i| r[(i, 0)]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expm_of_diagonal_matches_scalar_exponentials() {
        let d = [c64::new(0.3, 1.0), c64::new(-2.0, 0.5), c64::new(4.0, -3.0)];
        let a = Mat::from_fn(3, 3, |i, j| if i == j { d[i] } else { c64::new(0.0, 0.0) });
        let e = expm(a.as_ref());
        for i in 0..3 {
            let want = d[i].exp();
            assert!((e[(i, i)] - want).norm() < 1e-12 * want.norm());
        }
    }

    #[test]
    fn expm_of_nilpotent_is_polynomial() {
        let mut a = Mat::<c64>::zeros(2, 2);
        a[(0, 1)] = c64::new(5.0, 0.0);
        let e = expm(a.as_ref());
        assert!((e[(0, 1)] - c64::new(5.0, 0.0)).norm() < 1e-12);
        assert!((e[(0, 0)] - c64::new(1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn power_matches_repeated_product() {
        let a = Mat::from_fn(4, 4, |i, j| c64::new((i + 2 * j) as f64 * 0.1, (i as f64 - j as f64) * 0.05));
        let mut p = identity(4);
        for _ in 0..7 {
            p = &p * &a;
        }
        let q = power(a.as_ref(), 7);
        assert!(max_diff(p.as_ref(), q.as_ref()) < 1e-12 * max_abs(p.as_ref()));
        assert!(max_diff(power(a.as_ref(), 0).as_ref(), identity(4).as_ref()) == 0.0);
    }

    #[test]
    fn hermitian_exp_of_zero_is_identity() {
        let z = Mat::<c64>::zeros(5, 5);
        let e = hermitian_function(z.as_ref(), f64::exp).unwrap();
        assert!(max_diff(e.as_ref(), identity(5).as_ref()) < 1e-14);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = identity(3);
        let mut b = identity(3);
        assert_eq!(matrix_hash(a.as_ref()), matrix_hash(b.as_ref()));
        b[(1, 2)] = c64::new(1e-300, 0.0);
        assert_ne!(matrix_hash(a.as_ref()), matrix_hash(b.as_ref()));
    }
}
