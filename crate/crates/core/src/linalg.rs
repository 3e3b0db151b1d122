//! Dense Cholesky factorization and triangular solves for the small
//! covariance matrices of the simulation designs.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{CmiError, Result};

/// Lower-triangular `L` with `L Lᵀ = a`.
pub fn cholesky(a: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(CmiError::DimensionMismatch {
            context: "cholesky: square matrix",
            expected: n,
            got: a.ncols(),
        });
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[[j, j]];
        for k in 0..j {
            diag -= l[[j, k]] * l[[j, k]];
        }
        if !(diag > 0.0) {
            return Err(CmiError::Degenerate(format!(
                "matrix is not positive definite (pivot {j} = {diag})"
            )));
        }
        let d = diag.sqrt();
        l[[j, j]] = d;
        for i in j + 1..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / d;
        }
    }
    Ok(l)
}

/// Solves `L v = b` for lower-triangular `L`.
pub fn solve_lower(l: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut v = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * v[k];
        }
        v[i] = s / l[[i, i]];
    }
    v
}

/// Solves `Lᵀ v = b` for lower-triangular `L`.
pub fn solve_lower_transpose(l: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut v = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[[k, i]] * v[k];
        }
        v[i] = s / l[[i, i]];
    }
    v
}

/// Solves `(L Lᵀ) v = b`.
pub fn cholesky_solve(l: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let w = solve_lower(l, b);
    solve_lower_transpose(l, w.view())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn factor_and_solve() {
        let a = array![[4.0, 2.0, 0.4], [2.0, 5.0, 1.0], [0.4, 1.0, 3.0]];
        let l = cholesky(a.view()).unwrap();
        let back = l.dot(&l.t());
        for (x, y) in back.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        let b = array![1.0, -2.0, 0.5];
        let v = cholesky_solve(l.view(), b.view());
        let r = a.dot(&v) - &b;
        assert!(r.iter().all(|e| e.abs() < 1e-12));
    }

    #[test]
    fn rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(cholesky(a.view()).is_err());
    }
}
