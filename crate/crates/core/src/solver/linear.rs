//! Closed-form minimizer of the pOSE terms over points and translations.

use nalgebra::{DMatrix, DVector};

use super::system::regularized_inverse;
use crate::error::{Error, Result};
use crate::geometry::{Mat3, Point3, Vec3};
use crate::objective::{observation_map, Problem};

/// Optimal points and translations for fixed camera blocks.
#[derive(Debug, Clone)]
pub struct LinearSolution {
    pub c: Vec<Point3>,
    pub t: Vec<Vec3>,
    /// A point block was ill-conditioned and regularized.
    pub rank_deficient: bool,
}

/// Minimizes `sum_obs |L (a_i u_j + t_i) - d|^2` over `(u, t)`.
///
/// Points are eliminated per 3x3 block; the remaining translation system
/// carries the 3-dimensional translation gauge (`u += d`, `t_i -= a_i d`),
/// which a ridge of `1e-12` relative to its diagonal pins down.
pub fn solve_linear_cv(prob: &Problem, b_fixed: &[Mat3]) -> Result<LinearSolution> {
    solve_linear_cv_grouped(prob, &prob.observations_by_point(), b_fixed)
}

pub(crate) fn solve_linear_cv_grouped(
    prob: &Problem,
    by_point: &[Vec<usize>],
    b: &[Mat3],
) -> Result<LinearSolution> {
    if b.len() != prob.n_cams {
        return Err(Error::DimensionMismatch(format!(
            "{} camera blocks for {} cameras",
            b.len(),
            prob.n_cams
        )));
    }
    if b.iter().any(|a| a.iter().any(|x| !x.is_finite())) {
        return Err(Error::InvalidConfig("camera blocks are not finite".into()));
    }
    let f = prob.n_cams;
    let eta = prob.config.eta;
    let d = Vec3::new(0.0, 0.0, eta.sqrt());
    let mut s = DMatrix::<f64>::zeros(3 * f, 3 * f);
    let mut rhs = DVector::<f64>::zeros(3 * f);
    let mut e_inv = Vec::with_capacity(prob.n_pts);
    let mut h_p = Vec::with_capacity(prob.n_pts);
    let mut fmat = vec![Mat3::zeros(); prob.observations.len()];
    let mut rank_deficient = false;
    for obs in by_point {
        let mut e = Mat3::zeros();
        let mut hp = Vec3::zeros();
        for &o in obs {
            let ob = &prob.observations[o];
            let l = observation_map(&ob.m, eta);
            let q = l.transpose() * l;
            let ltd = l.transpose() * d;
            let a = &b[ob.cam];
            // F_o = a^T Q couples u_j and t_i
            let fo = a.transpose() * q;
            e += fo * a;
            hp += a.transpose() * ltd;
            fmat[o] = fo;
            let i = ob.cam;
            {
                let mut blk = s.fixed_view_mut::<3, 3>(3 * i, 3 * i);
                blk += q;
            }
            let mut seg = rhs.fixed_rows_mut::<3>(3 * i);
            seg += ltd;
        }
        let (ei, flagged) = regularized_inverse(&e);
        rank_deficient |= flagged;
        for &o in obs {
            let i = prob.observations[o].cam;
            let fe = fmat[o].transpose() * ei;
            {
                let mut seg = rhs.fixed_rows_mut::<3>(3 * i);
                seg -= fe * hp;
            }
            for &o2 in obs {
                let i2 = prob.observations[o2].cam;
                let mut blk = s.fixed_view_mut::<3, 3>(3 * i, 3 * i2);
                blk -= fe * fmat[o2];
            }
        }
        e_inv.push(ei);
        h_p.push(hp);
    }
    let damp = DVector::zeros(3 * f);
    let t_flat = super::system::solve_damped(&s, &rhs, &damp).ok_or(Error::RankDeficient)?;
    let t: Vec<Vec3> = (0..f)
        .map(|i| t_flat.fixed_rows::<3>(3 * i).into_owned())
        .collect();
    let c = by_point
        .iter()
        .enumerate()
        .map(|(j, obs)| {
            let mut acc = h_p[j];
            for &o in obs {
                acc -= fmat[o] * t[prob.observations[o].cam];
            }
            e_inv[j] * acc
        })
        .collect();
    Ok(LinearSolution {
        c,
        t,
        rank_deficient,
    })
}
