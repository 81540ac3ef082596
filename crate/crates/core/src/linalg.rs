//! Small dense complex linear algebra helpers.
//!
//! Only what the estimators and optimizers need: Hermitian positive definite
//! solves via Cholesky, conjugate transposes and norms.

use ndarray::{Array2, ArrayView2, Axis};

use crate::prelude::*;
use crate::{CMatrix, Error, Result, C64};

/// Conjugate transpose.
pub fn adjoint(a: &ArrayView2<'_, C64>) -> CMatrix {
    a.t().mapv(|z| z.conj())
}

pub fn frobenius_norm(a: &ArrayView2<'_, C64>) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Lower-triangular `L` with `A = L L^H`.
///
/// Fails when `A` is not numerically positive definite.
pub fn cholesky(a: &ArrayView2<'_, C64>) -> Result<CMatrix> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::shape(format!("cholesky of {}x{} matrix", n, a.ncols())));
    }
    let scale = (0..n).map(|i| a[[i, i]].re.abs()).fold(0.0, f64::max);
    let mut l = Array2::<C64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]].re;
        for k in 0..j {
            d -= l[[j, k]].norm_sqr();
        }
        if !(d > scale * 1e-15) || !d.is_finite() {
            return Err(Error::numerical(format!(
                "matrix is not positive definite (pivot {j} = {d:e})"
            )));
        }
        let djj = d.sqrt();
        l[[j, j]] = C64::new(djj, 0.0);
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]].conj();
            }
            l[[i, j]] = s / djj;
        }
    }
    Ok(l)
}

/// Solve `A X = B` for Hermitian positive definite `A`.
pub fn solve_hpd(a: &ArrayView2<'_, C64>, b: &ArrayView2<'_, C64>) -> Result<CMatrix> {
    let n = a.nrows();
    if b.nrows() != n {
        return Err(Error::shape(format!(
            "right-hand side has {} rows, expected {n}",
            b.nrows()
        )));
    }
    let l = cholesky(a)?;
    let mut x = b.to_owned();
    for mut col in x.axis_iter_mut(Axis(1)) {
        // forward: L y = b
        for i in 0..n {
            let mut s = col[i];
            for k in 0..i {
                s -= l[[i, k]] * col[k];
            }
            col[i] = s / l[[i, i]].re;
        }
        // backward: L^H x = y
        for i in (0..n).rev() {
            let mut s = col[i];
            for k in (i + 1)..n {
                s -= l[[k, i]].conj() * col[k];
            }
            col[i] = s / l[[i, i]].re;
        }
    }
    Ok(x)
}
