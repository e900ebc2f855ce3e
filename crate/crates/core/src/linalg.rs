//! Small dense helpers shared across modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::scalar::{lit, Real};

pub fn symmetrize<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    (m + m.transpose()) * lit::<T>(0.5)
}

pub fn symmetrize_in_place<T: Real>(m: &mut DMatrix<T>) {
    let n = m.nrows();
    let half = lit::<T>(0.5);
    for i in 0..n {
        for j in (i + 1)..n {
            let a = (m[(i, j)] + m[(j, i)]) * half;
            m[(i, j)] = a;
            m[(j, i)] = a;
        }
    }
}

/// Relative Frobenius asymmetry `‖M − Mᵀ‖_F / max(‖M‖_F, 1)`.
pub fn asymmetry<T: Real>(m: &DMatrix<T>) -> T {
    let d = (m - m.transpose()).norm();
    d / m.norm().max(T::one())
}

/// Extreme eigenvalues `(min, max)` of the symmetric part of `m`.
pub fn sym_eig_extremes<T: Real>(m: &DMatrix<T>) -> (T, T) {
    if m.nrows() == 0 {
        return (T::zero(), T::zero());
    }
    let e = SymmetricEigen::new(symmetrize(m)).eigenvalues;
    let mut lo = e[0];
    let mut hi = e[0];
    for &v in e.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

/// Spectral norm (largest singular value).
pub fn spectral_norm<T: Real>(m: &DMatrix<T>) -> T {
    if m.nrows() == 0 || m.ncols() == 0 {
        return T::zero();
    }
    let sv = m.clone().singular_values();
    sv.iter().fold(T::zero(), |a, &b| a.max(b))
}

/// 2-norm condition number from singular values; infinite if singular.
pub fn condition_number<T: Real>(m: &DMatrix<T>) -> T {
    let sv = m.clone().singular_values();
    let mut lo = sv[0];
    let mut hi = sv[0];
    for &s in sv.iter() {
        lo = lo.min(s);
        hi = hi.max(s);
    }
    if lo <= T::zero() {
        return lit(f64::INFINITY);
    }
    hi / lo
}

pub fn inverse<T: Real>(m: &DMatrix<T>) -> Option<DMatrix<T>> {
    m.clone().try_inverse()
}

/// Max over a slice of vectors of the Euclidean norm.
pub fn max_norm<T: Real>(vs: &[DVector<T>]) -> T {
    vs.iter().fold(T::zero(), |a, v| a.max(v.norm()))
}
