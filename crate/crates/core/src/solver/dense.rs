//! Reference variable-projection step on dense matrices.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::objective::{assemble_residuals, jacobians, Problem, Variables};

/// Same step as [`super::varpro_step`], computed by forming `J`, `K` and an
/// orthonormal basis of `range(K)` from its SVD. Cubic in the problem size;
/// meant for small instances and cross-checks.
pub fn varpro_step_dense(prob: &Problem, vars: &Variables, lambda: f64) -> Result<(DVector<f64>, f64)> {
    let r = assemble_residuals(prob, vars)?;
    let (j, k) = jacobians(prob, vars)?;
    let (j, k) = (j.to_dense(), k.to_dense());
    let svd = k.svd(true, false);
    let u = svd.u.ok_or(Error::LinearSolveFailure)?;
    let smax = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&c| svd.singular_values[c] > 1e-10 * smax)
        .collect();
    let q = DMatrix::from_fn(u.nrows(), keep.len(), |row, c| u[(row, keep[c])]);
    let pj = &j - &q * (q.transpose() * &j);
    let pr = &r - &q * (q.transpose() * &r);
    let n = j.ncols();
    let a = pj.transpose() * &pj + DMatrix::identity(n, n) * lambda;
    let g = pj.transpose() * &pr;
    let db = -a
        .cholesky()
        .ok_or(Error::LinearSolveFailure)?
        .solve(&g);
    let predicted = (&pj * &db + &pr).norm_squared();
    Ok((db, predicted))
}
