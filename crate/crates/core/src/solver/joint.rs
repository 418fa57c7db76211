//! Joint Levenberg-Marquardt over cameras and points.

use nalgebra::{DMatrix, DVector};

use super::system::{self, CAM_DOF};
use super::{stall_status, Progress, SolveReport, SolveStatus, SolverConfig};
use crate::error::Result;
use crate::geometry::{nearest_rotation, rotation_exp, rotation_log, Mat3, Vec3};
use crate::objective::{exp_block_jacobian, objective_value, Parametrization, Problem, Variables};

/// Rotation vector of the rotation closest to `b`; an angle of exactly pi
/// falls back to the axis from the symmetric part.
pub(crate) fn initial_omega(b: &Mat3) -> Vec3 {
    let r = nearest_rotation(b);
    match rotation_log(&r) {
        Ok(w) => w,
        Err(_) => {
            // R = 2 n n^T - I at angle pi
            let s = (r.matrix() + Mat3::identity()) * 0.5;
            let col = (0..3)
                .max_by(|&x, &y| s[(x, x)].total_cmp(&s[(y, y)]))
                .unwrap_or(0);
            let n = s.column(col).into_owned();
            let n = n / n.norm().max(f64::MIN_POSITIVE);
            n * std::f64::consts::PI
        }
    }
}

/// Damps every variable by `lambda`, points included, and updates all of them
/// from the linearized step. With [`Parametrization::ExponentialMap`] each
/// camera block is `exp([w]_x)` and the step is taken in `w`; the initial
/// `w` is the logarithm of the rotation nearest to the initial block.
pub fn solve_joint_lm(
    prob: &Problem,
    cfg: &SolverConfig,
    init: &Variables,
    param: Parametrization,
) -> Result<SolveReport> {
    cfg.validate()?;
    prob.config.validate()?;
    init.check_dims(prob)?;
    let priors = prob.active_priors();
    let by_point = prob.observations_by_point();
    let f = prob.n_cams;
    let mut omega: Vec<Vec3> = Vec::new();
    let mut vars = init.clone();
    if param == Parametrization::ExponentialMap {
        omega = init.b.iter().map(initial_omega).collect();
        vars.b = omega.iter().map(|w| rotation_exp(w).into_inner()).collect();
    }
    let mut error = objective_value(prob, &vars)?.total;
    let mut trace = vec![error];
    let mut lambda = cfg.lambda0;
    let mut progress = Progress::new(cfg);
    let mut iters = 0;
    let mut accepted = 0;
    let mut status = SolveStatus::MaxIters;
    'outer: while iters < cfg.max_iters {
        let g_blocks: Vec<_> = omega.iter().map(exp_block_jacobian).collect();
        loop {
            iters += 1;
            let sys = system::build(prob, &priors, &by_point, &vars, lambda);
            let dtheta = match param {
                Parametrization::FreeMatrix => {
                    let damp = DVector::from_element(CAM_DOF * f, lambda);
                    system::solve_damped(&sys.s, &sys.rhs, &damp)
                }
                Parametrization::ExponentialMap => {
                    let g = chain_matrix(&g_blocks);
                    let s = g.transpose() * &sys.s * &g;
                    let rhs = g.transpose() * &sys.rhs;
                    let damp = DVector::from_element(6 * f, lambda);
                    system::solve_damped(&s, &rhs, &damp).map(|dxi| {
                        let full = &g * &dxi;
                        // keep the tangent step alongside the chained one
                        let mut out = DVector::zeros(CAM_DOF * f + 6 * f);
                        out.rows_mut(0, CAM_DOF * f).copy_from(&full);
                        out.rows_mut(CAM_DOF * f, 6 * f).copy_from(&dxi);
                        out
                    })
                }
            };
            let candidate = dtheta.and_then(|dt| {
                let cam = dt.rows(0, CAM_DOF * f).into_owned();
                let dc = sys.back_substitute(prob, &by_point, &vars, &cam);
                let mut cand = vars.clone();
                let mut new_omega = omega.clone();
                for i in 0..f {
                    match param {
                        Parametrization::FreeMatrix => {
                            cand.b[i] += Mat3::from_column_slice(cam.rows(CAM_DOF * i, 9).as_slice());
                        }
                        Parametrization::ExponentialMap => {
                            new_omega[i] += dt.fixed_rows::<3>(CAM_DOF * f + 6 * i).into_owned();
                            cand.b[i] = rotation_exp(&new_omega[i]).into_inner();
                        }
                    }
                    cand.t[i] += cam.fixed_rows::<3>(CAM_DOF * i + 9).into_owned();
                }
                for (u, d) in cand.c.iter_mut().zip(&dc) {
                    *u += d;
                }
                let fv = objective_value(prob, &cand).ok()?.total;
                fv.is_finite().then_some((cand, new_omega, fv))
            });
            match candidate {
                Some((cand, new_omega, fv)) if fv < error => {
                    let done = progress.accept(error, fv);
                    vars = cand;
                    omega = new_omega;
                    error = fv;
                    trace.push(fv);
                    accepted += 1;
                    lambda /= cfg.success_div;
                    if done {
                        status = SolveStatus::Converged;
                        break 'outer;
                    }
                    break;
                }
                _ => {
                    lambda *= cfg.fail_mul;
                    if lambda > cfg.lambda_max {
                        let grad = (sys.rhs.norm_squared()
                            + sys.g_p.iter().map(|g| g.norm_squared()).sum::<f64>())
                        .sqrt();
                        status = stall_status(cfg, grad, error);
                        break 'outer;
                    }
                }
            }
            if iters >= cfg.max_iters {
                break 'outer;
            }
        }
    }
    let term_breakdown = objective_value(prob, &vars)?;
    Ok(SolveReport {
        vars,
        objective_trace: trace,
        term_breakdown,
        iters_used: iters,
        accepted_steps: accepted,
        status,
    })
}

/// `blockdiag(D_i, I_3)` mapping `(w_i, t_i)` steps to `(vec a_i, t_i)` steps.
fn chain_matrix(blocks: &[crate::objective::Mat9x3]) -> DMatrix<f64> {
    let f = blocks.len();
    let mut g = DMatrix::zeros(CAM_DOF * f, 6 * f);
    for (i, d) in blocks.iter().enumerate() {
        g.fixed_view_mut::<9, 3>(CAM_DOF * i, 6 * i).copy_from(d);
        g.fixed_view_mut::<3, 3>(CAM_DOF * i + 9, 6 * i + 3)
            .copy_from(&Mat3::identity());
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RotationMatrix;
    use crate::solver::init_random;
    use crate::solver::test_support::random_problem;

    #[test]
    fn initial_omega_handles_angle_pi() {
        let w = Vec3::new(0.0, std::f64::consts::PI, 0.0);
        let r = rotation_exp(&w).into_inner();
        let got = rotation_exp(&initial_omega(&r)).into_inner();
        assert!((got - r).norm() < 1e-9);
        let w = Vec3::new(0.2, -0.4, 1.0);
        let r = rotation_exp(&w).into_inner() * 3.0;
        assert!((initial_omega(&r) - w).norm() < 1e-9);
    }

    #[test]
    fn free_matrix_lm_decreases_monotonically() {
        let prob = random_problem(2, 3, 10, true);
        let init = init_random(&prob, 2);
        let cfg = SolverConfig {
            max_iters: 30,
            ..Default::default()
        };
        let rep = solve_joint_lm(&prob, &cfg, &init, Parametrization::FreeMatrix).unwrap();
        assert!(rep.objective_trace.windows(2).all(|w| w[1] < w[0]));
        assert!(rep.accepted_steps > 0);
        assert!(rep.iters_used <= 30);
    }

    #[test]
    fn exp_map_lm_keeps_rotations() {
        let prob = random_problem(3, 3, 10, true);
        let init = init_random(&prob, 3);
        let cfg = SolverConfig {
            max_iters: 30,
            ..Default::default()
        };
        let rep = solve_joint_lm(&prob, &cfg, &init, Parametrization::ExponentialMap).unwrap();
        assert!(rep.accepted_steps > 0);
        assert!(rep.objective_trace.windows(2).all(|w| w[1] < w[0]));
        for b in &rep.vars.b {
            assert!(RotationMatrix::is_valid(b));
        }
    }

    #[test]
    fn chain_matrix_matches_finite_differences() {
        let w = Vec3::new(0.3, 0.1, -0.7);
        let g = chain_matrix(&[exp_block_jacobian(&w)]);
        let h = 1e-6;
        for k in 0..3 {
            let mut wp = w;
            let mut wm = w;
            wp[k] += h;
            wm[k] -= h;
            let fd = (rotation_exp(&wp).into_inner() - rotation_exp(&wm).into_inner()) / (2.0 * h);
            for idx in 0..9 {
                assert!((g[(idx, k)] - fd[(idx % 3, idx / 3)]).abs() < 1e-7);
            }
        }
    }
}
