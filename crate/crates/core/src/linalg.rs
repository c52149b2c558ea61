//! Small dense solvers for the normal equations of the linear baselines.

use ndarray::{Array1, Array2};

use crate::scalar::Scalar;

/// Cholesky factor `L` of a symmetric matrix, or `None` when a pivot falls
/// below `rel_tol` times the largest diagonal entry.
pub fn cholesky<S: Scalar>(a: &Array2<S>, rel_tol: S) -> Option<Array2<S>> {
    let n = a.nrows();
    let scale = (0..n).map(|i| a[[i, i]].abs()).fold(S::zero(), S::max);
    let floor = rel_tol * scale.max(S::min_positive_value());
    let mut l = Array2::<S>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[[j, j]];
        for k in 0..j {
            diag -= l[[j, k]] * l[[j, k]];
        }
        if !(diag > floor) {
            return None;
        }
        let ljj = diag.sqrt();
        l[[j, j]] = ljj;
        for i in j + 1..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / ljj;
        }
    }
    Some(l)
}

/// Solves `L L^T x = b`.
pub fn cholesky_solve<S: Scalar>(l: &Array2<S>, b: &Array1<S>) -> Array1<S> {
    let n = l.nrows();
    let mut y = Array1::<S>::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    let mut x = Array1::<S>::zeros(n);
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Inverse of an SPD matrix through its Cholesky factor.
pub fn spd_inverse<S: Scalar>(a: &Array2<S>) -> Option<Array2<S>> {
    let n = a.nrows();
    let l = cholesky(a, S::c(1e-14))?;
    let mut inv = Array2::zeros((n, n));
    for j in 0..n {
        let mut e = Array1::zeros(n);
        e[j] = S::one();
        inv.column_mut(j).assign(&cholesky_solve(&l, &e));
    }
    Some(inv)
}
