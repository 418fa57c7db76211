//! Gauss-Newton normal equations with the points eliminated.
//!
//! Camera parameters are `theta_i = vec([a_i | t_i])` (column-major, twelve
//! per camera, `t_i` last). For an observation the image vector is
//! `x = P_i (u, 1)`, so `dx/dtheta_i = (u, 1)^T (x) I_3` and every camera
//! block of the normal matrix is a Kronecker product with `(u,1)(u,1)^T`.

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};

use crate::geometry::{Mat3, Vec3};
use crate::objective::{observation_map, prior_jacobians, Problem, RotationPrior, Variables};

pub(crate) const CAM_DOF: usize = 12;

/// Schur complement of the normal equations onto the camera parameters.
pub(crate) struct ReducedSystem {
    /// `U - W E^{-1} W^T`, dense `12 f x 12 f`, symmetric.
    pub s: DMatrix<f64>,
    /// `-(g_theta - W E^{-1} g_p)`.
    pub rhs: DVector<f64>,
    /// `|r|^2 - sum_j g_pj^T E_j^{-1} g_pj`, the model value at a zero camera step.
    pub c0: f64,
    pub e_inv: Vec<Mat3>,
    pub g_p: Vec<Vec3>,
    /// Per observation `Q a_i` with `Q = L^T L`; `W_o = (u,1) (x) Q a_i`.
    pub z: Vec<Mat3>,
}

#[inline]
fn add_kron(
    dst: &mut [f64],
    nrows: usize,
    row0: usize,
    col0: usize,
    uu: &Matrix4<f64>,
    m: &Mat3,
    sign: f64,
) {
    for cc in 0..4 {
        for rc in 0..3 {
            let col = col0 + rc + 3 * cc;
            let base = nrows * col + row0;
            for c in 0..4 {
                let f = sign * uu[(c, cc)];
                let off = base + 3 * c;
                dst[off] += f * m[(0, rc)];
                dst[off + 1] += f * m[(1, rc)];
                dst[off + 2] += f * m[(2, rc)];
            }
        }
    }
}

/// Inverse of a symmetric 3x3 block; adds Tikhonov when it is ill-conditioned.
pub(crate) fn regularized_inverse(e: &Mat3) -> (Mat3, bool) {
    let ev = e.symmetric_eigenvalues();
    let (lo, hi) = (ev.min(), ev.max().max(f64::MIN_POSITIVE));
    if lo > 1e-12 * hi {
        if let Some(inv) = e.try_inverse() {
            return (inv, false);
        }
    }
    let reg = e + Mat3::identity() * (1e-10 * hi.max(1.0));
    (reg.try_inverse().unwrap_or_else(Mat3::zeros), true)
}

pub(crate) fn build(
    prob: &Problem,
    priors: &[RotationPrior],
    by_point: &[Vec<usize>],
    vars: &Variables,
    point_damping: f64,
) -> ReducedSystem {
    let f = prob.n_cams;
    let n = CAM_DOF * f;
    let eta = prob.config.eta;
    let d = eta.sqrt();
    let mut s = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    let mut cost = 0.0;
    let mut c0 = 0.0;
    let mut e_inv = vec![Mat3::zeros(); prob.n_pts];
    let mut g_p = vec![Vec3::zeros(); prob.n_pts];
    let mut z = vec![Mat3::zeros(); prob.observations.len()];
    let mut y = Vec::new();
    {
        let data = s.as_mut_slice();
        for (j, obs) in by_point.iter().enumerate() {
            let u = vars.c[j];
            let uh = Vector4::new(u.x, u.y, u.z, 1.0);
            let uu = uh * uh.transpose();
            let mut e = Mat3::identity() * point_damping;
            let mut gp = Vec3::zeros();
            for &o in obs {
                let ob = &prob.observations[o];
                let a = &vars.b[ob.cam];
                let x = a * u + vars.t[ob.cam];
                let l = observation_map(&ob.m, eta);
                let mut rho = l * x;
                rho.z -= d;
                cost += rho.norm_squared();
                let q = l.transpose() * l;
                let lr = l.transpose() * rho;
                let zo = q * a;
                e += a.transpose() * zo;
                gp += a.transpose() * lr;
                z[o] = zo;
                let i0 = CAM_DOF * ob.cam;
                add_kron(data, n, i0, i0, &uu, &q, 1.0);
                for c in 0..4 {
                    let mut seg = rhs.fixed_rows_mut::<3>(i0 + 3 * c);
                    seg -= lr * uh[c];
                }
            }
            let (ei, _) = regularized_inverse(&e);
            c0 -= (gp.transpose() * ei * gp)[0];
            y.clear();
            y.extend(obs.iter().map(|&o| z[o] * ei));
            for (a_idx, &o) in obs.iter().enumerate() {
                let i = prob.observations[o].cam;
                let yg = y[a_idx] * gp;
                for c in 0..4 {
                    let mut seg = rhs.fixed_rows_mut::<3>(CAM_DOF * i + 3 * c);
                    seg += yg * uh[c];
                }
                for &o2 in obs {
                    let i2 = prob.observations[o2].cam;
                    if i < i2 {
                        continue;
                    }
                    let m = y[a_idx] * z[o2].transpose();
                    add_kron(data, n, CAM_DOF * i, CAM_DOF * i2, &uu, &m, -1.0);
                }
            }
            e_inv[j] = ei;
            g_p[j] = gp;
        }
    }
    for p in priors {
        let (jk, jl) = prior_jacobians(p, &vars.b[p.k], &vars.b[p.l]);
        let r = crate::objective::residual_rot(&vars.b[p.k], &vars.b[p.l], p);
        cost += r.norm_squared();
        let (k0, l0) = (CAM_DOF * p.k, CAM_DOF * p.l);
        {
            let mut blk = s.fixed_view_mut::<9, 9>(k0, k0);
            blk += jk.transpose() * jk;
        }
        {
            let mut seg = rhs.fixed_rows_mut::<9>(k0);
            seg -= jk.transpose() * r;
        }
        if !p.is_self() {
            {
                let mut blk = s.fixed_view_mut::<9, 9>(l0, l0);
                blk += jl.transpose() * jl;
            }
            {
                // lower block triangle only: (max, min)
                let (hi, lo, jh, jo) = if p.l > p.k { (l0, k0, &jl, &jk) } else { (k0, l0, &jk, &jl) };
                let mut blk = s.fixed_view_mut::<9, 9>(hi, lo);
                blk += jh.transpose() * jo;
            }
            let mut seg = rhs.fixed_rows_mut::<9>(l0);
            seg -= jl.transpose() * r;
        }
    }
    // mirror the lower block triangle
    for col in 0..n {
        for row in 0..col {
            let cam_r = row / CAM_DOF;
            let cam_c = col / CAM_DOF;
            if cam_r == cam_c {
                continue;
            }
            s[(row, col)] = s[(col, row)];
        }
    }
    c0 += cost;
    ReducedSystem {
        s,
        rhs,
        c0,
        e_inv,
        g_p,
        z,
    }
}

impl ReducedSystem {
    /// Point updates `E_j^{-1} (-g_p - W^T dtheta)` for a camera step.
    pub fn back_substitute(
        &self,
        prob: &Problem,
        by_point: &[Vec<usize>],
        vars: &Variables,
        dtheta: &DVector<f64>,
    ) -> Vec<Vec3> {
        by_point
            .iter()
            .enumerate()
            .map(|(j, obs)| {
                let u = vars.c[j];
                let uh = Vector4::new(u.x, u.y, u.z, 1.0);
                let mut acc = self.g_p[j];
                for &o in obs {
                    let i = prob.observations[o].cam;
                    let mut px = Vec3::zeros();
                    for c in 0..4 {
                        px += dtheta.fixed_rows::<3>(CAM_DOF * i + 3 * c) * uh[c];
                    }
                    acc += self.z[o].transpose() * px;
                }
                -(self.e_inv[j] * acc)
            })
            .collect()
    }

    /// Model value `c0 - 2 rhs^T d + d^T S d` of an undamped camera step.
    pub fn predicted(&self, dtheta: &DVector<f64>) -> f64 {
        self.c0 - 2.0 * self.rhs.dot(dtheta) + dtheta.dot(&(&self.s * dtheta))
    }
}

/// Solves `(S + diag(damp)) x = rhs` by Cholesky. A ridge of `1e-12` times the
/// largest diagonal entry is always added and escalated until the
/// factorization succeeds; it covers the translation gauge of `t`.
pub(crate) fn solve_damped(
    s: &DMatrix<f64>,
    rhs: &DVector<f64>,
    damp: &DVector<f64>,
) -> Option<DVector<f64>> {
    let scale = s.diagonal().amax().max(1.0);
    let mut ridge = 1e-12 * scale;
    for _ in 0..8 {
        let mut a = s.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += damp[i] + ridge;
        }
        if let Some(ch) = a.cholesky() {
            let x = ch.solve(rhs);
            if x.iter().all(|v| v.is_finite()) {
                return Some(x);
            }
        }
        ridge *= 100.0;
    }
    None
}
