//! Small dense linear-algebra helpers on top of `nalgebra`.
//!
//! Everything here works on `DMatrix<f64>`; dimensions are the number of
//! service phases, so cubic and even `d^6` algorithms are fine.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Spectral norm (largest singular value).
pub fn op_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Hilbert-Schmidt (Frobenius) norm.
pub fn hs_norm(m: &DMatrix<f64>) -> f64 {
    m.norm()
}

/// 2-norm condition number; `f64::INFINITY` for singular input.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        sv.max() / min
    }
}

/// Symmetric part `(m + m') / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest absolute entry of `m - m'`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).amax()
}

/// Smallest and largest eigenvalue of the symmetric part of `m`.
pub fn sym_eig_range(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = SymmetricEigen::new(symmetrize(m));
    (eig.eigenvalues.min(), eig.eigenvalues.max())
}

/// Unique symmetric positive semi-definite square root of a symmetric
/// matrix. Negative eigenvalues (round-off) are clamped to zero.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// Solves the continuous Lyapunov equation `X A + A' X = C` by the
/// Kronecker (vectorized) formulation. Returns `None` when the operator is
/// singular, i.e. when `A` and `-A` share an eigenvalue.
pub fn solve_lyapunov(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    if n == 0 {
        return Some(DMatrix::zeros(0, 0));
    }
    let eye = DMatrix::<f64>::identity(n, n);
    let at = a.transpose();
    // Column-major vec: vec(X A) = (A' (x) I) vec(X), vec(A' X) = (I (x) A') vec(X).
    let op = at.kronecker(&eye) + eye.kronecker(&at);
    let rhs = DVector::from_column_slice(c.as_slice());
    let sol = op.lu().solve(&rhs)?;
    Some(symmetrize(&DMatrix::from_column_slice(n, n, sol.as_slice())))
}

/// Orthonormal basis (as columns) of the hyperplane `{y : e'y = 0}`.
pub fn sum_zero_basis(d: usize) -> DMatrix<f64> {
    if d <= 1 {
        return DMatrix::zeros(d, 0);
    }
    let mut m = DMatrix::<f64>::zeros(d, d);
    m.column_mut(0).fill(1.0 / (d as f64).sqrt());
    for j in 1..d {
        m[(j - 1, j)] = 1.0;
    }
    let q = m.qr().q();
    q.columns(1, d - 1).into_owned()
}

/// Row-major nested vectors, the layout used in JSON output.
pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// `serialize_with` adapter writing a matrix as nested rows.
pub fn serialize_rows<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
    serde::Serialize::serialize(&to_rows(m), s)
}

/// Matrix-vector product into a preallocated slice; `m` is column-major
/// `n x n`.
#[inline]
pub(crate) fn matvec_into(m: &[f64], n: usize, x: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        let col = &m[j * n..(j + 1) * n];
        for (o, &c) in out.iter_mut().zip(col) {
            *o += c * xj;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sqrt_reproduces_matrix() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let r = sym_sqrt(&m);
        assert!(asymmetry(&r) < 1e-14);
        assert_relative_eq!(&r * &r, m, epsilon = 1e-12);
    }

    #[test]
    fn lyapunov_residual_vanishes() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.1, 0.0, 0.22, -2.2]);
        let c = -DMatrix::<f64>::identity(2, 2);
        let x = solve_lyapunov(&a, &c).unwrap();
        let res = &x * &a + a.transpose() * &x - &c;
        assert!(res.amax() < 1e-12);
    }

    #[test]
    fn lyapunov_scalar() {
        let a = DMatrix::from_element(1, 1, -1.0);
        let c = DMatrix::from_element(1, 1, -1.0);
        assert_relative_eq!(solve_lyapunov(&a, &c).unwrap()[(0, 0)], 0.5);
    }

    #[test]
    fn sum_zero_basis_is_orthonormal_complement() {
        for d in 1..6 {
            let u = sum_zero_basis(d);
            assert_eq!(u.ncols(), d - 1);
            let e = DVector::from_element(d, 1.0);
            assert!((u.transpose() * &e).amax() < 1e-12);
            let g = u.transpose() * &u;
            assert!((g - DMatrix::identity(d - 1, d - 1)).amax() < 1e-12);
        }
    }

    #[test]
    fn op_norm_of_rank_one() {
        // |a e'| = |a| sqrt(d)
        let a = DVector::from_vec(vec![3.0, 4.0]);
        let e = DVector::from_element(2, 1.0);
        assert_relative_eq!(op_norm(&(&a * e.transpose())), 5.0 * 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn matvec_matches_nalgebra() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let x = [0.5, -1.0];
        let mut out = [0.0; 2];
        matvec_into(m.as_slice(), 2, &x, &mut out);
        let expect = &m * DVector::from_row_slice(&x);
        assert_eq!(out.as_slice(), expect.as_slice());
    }
}
