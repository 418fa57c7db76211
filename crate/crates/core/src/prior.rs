//! Relative-rotation priors from two-view problems.
//!
//! A two-view problem is refined to a local minimum of the reprojection
//! error; its Jacobians give the reduced information `J^T (I - K K^+) J` on
//! the rotation, which is lifted to a 9x9 weight on `vec(R_k R_l^T - R~)`
//! through an orthonormal tangent/normal basis at `R~`.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3x2, SMatrix};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{skew, vec_col_major, Mat3, Point3, RotationMatrix, Vec2, Vec3, Vec9};
use crate::objective::{Mat9, RotationPrior};

type Mat5 = SMatrix<f64, 5, 5>;
type Mat5x3 = SMatrix<f64, 5, 3>;
type Vec5 = SMatrix<f64, 5, 1>;

/// Reference camera `[I | 0]` observes `.0`, the second camera `[R | t]`
/// observes `.1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoViewProblem {
    pub correspondences: Vec<(Vec2, Vec2)>,
    pub initial: TwoViewPose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoViewPose {
    pub rot: RotationMatrix,
    /// Unit translation of the second camera.
    pub t: Vec3,
    /// Points in the reference camera frame.
    pub points: Vec<Point3>,
}

/// A converged two-view solution with the Jacobians used to build the weight.
///
/// Rows of `j` and `k` follow the correspondences, four per correspondence
/// (reference x/y, second x/y). `j` has three columns, the left perturbation
/// `exp([xi]_x) R~` at `xi = 0`. `k` has two columns for the tangent step of
/// `t` followed by three per point.
#[derive(Debug, Clone)]
pub struct TwoViewLocalMin {
    pub r_tilde: RotationMatrix,
    pub v_tilde: TwoViewPose,
    pub residual: DVector<f64>,
    pub j: DMatrix<f64>,
    pub k: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineOptions {
    pub max_iters: usize,
    /// Gradient bound a returned minimum must satisfy.
    pub grad_tol: f64,
    /// Iteration continues until the gradient drops below this or stalls.
    pub polish_tol: f64,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            grad_tol: 1e-6,
            polish_tol: 1e-12,
        }
    }
}

/// Orthonormal basis of 2-vectors spanning the plane orthogonal to `t`.
fn tangent_basis(t: &Vec3) -> Matrix3x2<f64> {
    let helper = if t.x.abs() < 0.6 { Vec3::x() } else { Vec3::y() };
    let e1 = t.cross(&helper).normalize();
    let e2 = t.cross(&e1).normalize();
    Matrix3x2::from_columns(&[e1, e2])
}

fn projection_jacobian(x: &Vec3) -> SMatrix<f64, 2, 3> {
    let iz = 1.0 / x.z;
    SMatrix::<f64, 2, 3>::new(iz, 0.0, -x.x * iz * iz, 0.0, iz, -x.y * iz * iz)
}

fn dehomogenize(x: &Vec3) -> Vec2 {
    x.xy() / x.z
}

/// Per-correspondence residual and derivative blocks.
struct CorrBlocks {
    r: SMatrix<f64, 4, 1>,
    /// d r / d xi
    j_rot: SMatrix<f64, 4, 3>,
    /// d r / d (t tangent)
    j_t: SMatrix<f64, 4, 2>,
    /// d r / d u
    j_u: SMatrix<f64, 4, 3>,
}

fn corr_blocks(
    rot: &Mat3,
    t: &Vec3,
    basis: &Matrix3x2<f64>,
    u: &Vec3,
    m: &(Vec2, Vec2),
) -> CorrBlocks {
    let x2 = rot * u + t;
    let r1 = dehomogenize(u) - m.0;
    let r2 = dehomogenize(&x2) - m.1;
    let d1 = projection_jacobian(u);
    let d2 = projection_jacobian(&x2);
    let mut j_rot = SMatrix::<f64, 4, 3>::zeros();
    j_rot
        .fixed_view_mut::<2, 3>(2, 0)
        .copy_from(&(d2 * -skew(&(rot * u))));
    let mut j_t = SMatrix::<f64, 4, 2>::zeros();
    j_t.fixed_view_mut::<2, 2>(2, 0).copy_from(&(d2 * basis));
    let mut j_u = SMatrix::<f64, 4, 3>::zeros();
    j_u.fixed_view_mut::<2, 3>(0, 0).copy_from(&d1);
    j_u.fixed_view_mut::<2, 3>(2, 0).copy_from(&(d2 * rot));
    CorrBlocks {
        r: SMatrix::<f64, 4, 1>::new(r1.x, r1.y, r2.x, r2.y),
        j_rot,
        j_t,
        j_u,
    }
}

fn two_view_cost(tv: &TwoViewProblem, pose: &TwoViewPose) -> f64 {
    tv.correspondences
        .iter()
        .zip(&pose.points)
        .map(|(m, u)| {
            let x2 = pose.rot.matrix() * u + pose.t;
            (dehomogenize(u) - m.0).norm_squared() + (dehomogenize(&x2) - m.1).norm_squared()
        })
        .sum()
}

/// Levenberg-Marquardt on the two-view reprojection error.
pub fn refine_two_view(tv: &TwoViewProblem) -> Result<TwoViewLocalMin> {
    refine_two_view_with(tv, &RefineOptions::default(), false)
}

/// As [`refine_two_view`]; with `fix_rotation` only `t` and the points move.
pub fn refine_two_view_with(
    tv: &TwoViewProblem,
    opts: &RefineOptions,
    fix_rotation: bool,
) -> Result<TwoViewLocalMin> {
    let n = tv.correspondences.len();
    if n < 5 {
        return Err(Error::DegenerateGeometry(format!("{n} correspondences, need at least 5")));
    }
    if tv.initial.points.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} correspondences but {} initial points",
            n,
            tv.initial.points.len()
        )));
    }
    let mut pose = tv.initial.clone();
    pose.t = pose.t.normalize();
    let mut cost = two_view_cost(tv, &pose);
    let mut lambda = 1e-4;
    for _ in 0..opts.max_iters {
        let basis = tangent_basis(&pose.t);
        let rot = *pose.rot.matrix();
        let mut h_cc = Mat5::zeros();
        let mut g_c = Vec5::zeros();
        let mut point_terms = Vec::with_capacity(n);
        let mut grad_sq = 0.0;
        for (m, u) in tv.correspondences.iter().zip(&pose.points) {
            let bl = corr_blocks(&rot, &pose.t, &basis, u, m);
            let mut jc = SMatrix::<f64, 4, 5>::zeros();
            if !fix_rotation {
                jc.fixed_view_mut::<4, 3>(0, 0).copy_from(&bl.j_rot);
            }
            jc.fixed_view_mut::<4, 2>(0, 3).copy_from(&bl.j_t);
            h_cc += jc.transpose() * jc;
            g_c += jc.transpose() * bl.r;
            let g_u = bl.j_u.transpose() * bl.r;
            grad_sq += g_u.norm_squared();
            point_terms.push((bl.j_u.transpose() * bl.j_u, jc.transpose() * bl.j_u, g_u));
        }
        let res_norm = cost.sqrt();
        if (grad_sq + g_c.norm_squared()).sqrt() <= opts.polish_tol * (1.0 + res_norm) {
            break;
        }
        loop {
            // Schur elimination of the per-point 3x3 blocks
            let mut s = h_cc + Mat5::identity() * lambda;
            let mut rhs = -g_c;
            let mut inv_blocks = Vec::with_capacity(n);
            for (e, w, g) in &point_terms {
                let e_inv = (e + Mat3::identity() * lambda)
                    .try_inverse()
                    .ok_or(Error::LinearSolveFailure)?;
                let we: Mat5x3 = w * e_inv;
                s -= we * w.transpose();
                rhs += we * g;
                inv_blocks.push(e_inv);
            }
            if fix_rotation {
                for k in 0..3 {
                    s.row_mut(k).fill(0.0);
                    s.column_mut(k).fill(0.0);
                    s[(k, k)] = 1.0;
                    rhs[k] = 0.0;
                }
            }
            let dc = s.cholesky().ok_or(Error::LinearSolveFailure)?.solve(&rhs);
            let mut cand = pose.clone();
            cand.rot = RotationMatrix::new_unchecked(
                RotationMatrix::exp(&dc.fixed_rows::<3>(0).into_owned()).into_inner() * rot,
            );
            cand.t = (pose.t + basis * dc.fixed_rows::<2>(3)).normalize();
            for (idx, (_, w, g)) in point_terms.iter().enumerate() {
                let du = -inv_blocks[idx] * (g + w.transpose() * dc);
                cand.points[idx] = pose.points[idx] + du;
            }
            let new_cost = two_view_cost(tv, &cand);
            if new_cost.is_finite() && new_cost <= cost {
                pose = cand;
                cost = new_cost;
                lambda = (lambda / 10.0).max(1e-12);
                break;
            }
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
        if lambda > 1e12 {
            break;
        }
    }
    let lm = local_min_at(tv, &pose);
    let grad = if fix_rotation {
        (lm.k.transpose() * &lm.residual).norm()
    } else {
        lm.gradient_norm()
    };
    if grad > opts.grad_tol * (1.0 + lm.residual.norm()) {
        return Err(Error::NoConvergence(opts.max_iters));
    }
    for u in &pose.points {
        if u.z <= 0.0 || (pose.rot.matrix() * u + pose.t).z <= 0.0 {
            return Err(Error::DegenerateGeometry("point behind a camera at the optimum".into()));
        }
    }
    Ok(lm)
}

/// Residual and Jacobians of the two-view problem at `pose`.
pub fn local_min_at(tv: &TwoViewProblem, pose: &TwoViewPose) -> TwoViewLocalMin {
    let n = tv.correspondences.len();
    let basis = tangent_basis(&pose.t);
    let mut residual = DVector::zeros(4 * n);
    let mut j = DMatrix::zeros(4 * n, 3);
    let mut k = DMatrix::zeros(4 * n, 2 + 3 * n);
    for (idx, (m, u)) in tv.correspondences.iter().zip(&pose.points).enumerate() {
        let bl = corr_blocks(pose.rot.matrix(), &pose.t, &basis, u, m);
        residual.fixed_rows_mut::<4>(4 * idx).copy_from(&bl.r);
        j.fixed_view_mut::<4, 3>(4 * idx, 0).copy_from(&bl.j_rot);
        k.fixed_view_mut::<4, 2>(4 * idx, 0).copy_from(&bl.j_t);
        k.fixed_view_mut::<4, 3>(4 * idx, 2 + 3 * idx).copy_from(&bl.j_u);
    }
    TwoViewLocalMin {
        r_tilde: pose.rot,
        v_tilde: pose.clone(),
        residual,
        j,
        k,
    }
}

impl TwoViewLocalMin {
    pub fn gradient_norm(&self) -> f64 {
        let gj = self.j.transpose() * &self.residual;
        let gk = self.k.transpose() * &self.residual;
        (gj.norm_squared() + gk.norm_squared()).sqrt()
    }

    pub fn n_correspondences(&self) -> usize {
        self.residual.len() / 4
    }
}

/// `J^T (I - K K^+) J` with the pseudo-inverse from an SVD of the dense `K`
/// (relative cutoff 1e-10).
pub fn projected_gram_svd(j: &DMatrix<f64>, k: &DMatrix<f64>) -> Mat3 {
    let svd = k.clone().svd(true, false);
    let u = svd.u.expect("svd u");
    let smax = svd.singular_values.max();
    let mut pj = j.clone();
    for (c, s) in svd.singular_values.iter().enumerate() {
        if *s > 1e-10 * smax {
            let col = u.column(c);
            let coeff = col.transpose() * &pj;
            pj -= col * coeff;
        }
    }
    let m = j.transpose() * pj;
    let m = (&m + m.transpose()) * 0.5;
    Mat3::from_iterator(m.iter().copied())
}

/// `J^T (I - K K^+) J` exploiting the block layout of `K`: per-point 3x3
/// blocks are eliminated first, then the two translation columns. Falls back
/// to [`projected_gram_svd`] when a point block is ill-conditioned.
pub fn projected_gram(lm: &TwoViewLocalMin) -> Mat3 {
    let n = lm.n_correspondences();
    let mut h = Mat5::zeros();
    for idx in 0..n {
        let mut jc = SMatrix::<f64, 4, 5>::zeros();
        jc.fixed_view_mut::<4, 3>(0, 0)
            .copy_from(&lm.j.fixed_view::<4, 3>(4 * idx, 0));
        jc.fixed_view_mut::<4, 2>(0, 3)
            .copy_from(&lm.k.fixed_view::<4, 2>(4 * idx, 0));
        let ju: SMatrix<f64, 4, 3> = lm.k.fixed_view::<4, 3>(4 * idx, 2 + 3 * idx).into_owned();
        let e = ju.transpose() * ju;
        let ev = e.symmetric_eigenvalues();
        if !(ev.min() > 1e-12 * ev.max()) {
            return projected_gram_svd(&lm.j, &lm.k);
        }
        let Some(e_inv) = e.try_inverse() else {
            return projected_gram_svd(&lm.j, &lm.k);
        };
        let w = jc.transpose() * ju;
        h += jc.transpose() * jc - w * e_inv * w.transpose();
    }
    let h_rr: Mat3 = h.fixed_view::<3, 3>(0, 0).into_owned();
    let h_rt: Matrix3x2<f64> = h.fixed_view::<3, 2>(0, 3).into_owned();
    let h_tt: Matrix2<f64> = h.fixed_view::<2, 2>(3, 3).into_owned();
    let h_tt_pinv = h_tt
        .pseudo_inverse(1e-10 * h_tt.norm())
        .unwrap_or_else(|_| Matrix2::zeros());
    let m = h_rr - h_rt * h_tt_pinv * h_rt.transpose();
    (m + m.transpose()) * 0.5
}

/// Orthonormal basis of 3x3 matrices split into tangent and normal directions
/// at a rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedBasis {
    pub b_mats: [Mat3; 9],
    /// Columns `vec(B_i R~)`.
    pub v: Mat9,
}

/// `B_1..B_3 = [e_i]_x / sqrt(2)`, then `e_i e_i^T`, then
/// `(e_i e_j^T + e_j e_i^T) / sqrt(2)` for `(i, j)` in `(1,2), (1,3), (2,3)`.
pub fn basis_matrices() -> [Mat3; 9] {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let e = [Vec3::x(), Vec3::y(), Vec3::z()];
    let mut out = [Mat3::zeros(); 9];
    for i in 0..3 {
        out[i] = skew(&e[i]) * s;
        out[3 + i] = e[i] * e[i].transpose();
    }
    for (slot, (i, j)) in [(0, 1), (0, 2), (1, 2)].into_iter().enumerate() {
        out[6 + slot] = (e[i] * e[j].transpose() + e[j] * e[i].transpose()) * s;
    }
    out
}

pub fn build_lifted_basis(r_tilde: &RotationMatrix) -> LiftedBasis {
    build_lifted_basis_scaled(r_tilde, 1.0)
}

/// Basis with every `V_i` multiplied by `scale`; `V` is orthogonal only for
/// `scale == 1`.
pub fn build_lifted_basis_scaled(r_tilde: &RotationMatrix, scale: f64) -> LiftedBasis {
    let b_mats = basis_matrices();
    let mut v = Mat9::zeros();
    for (i, b) in b_mats.iter().enumerate() {
        v.set_column(i, &(vec_col_major(&(b * r_tilde.matrix())) * scale));
    }
    LiftedBasis { b_mats, v }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightOptions {
    /// Weight of the six normal (symmetric) directions.
    pub normal_scale: f64,
    /// Multiplier on the lifted basis; 1 keeps it orthonormal.
    pub basis_scale: f64,
}

impl Default for WeightOptions {
    fn default() -> Self {
        Self {
            normal_scale: 1.0,
            basis_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftedWeight {
    pub w: Mat9,
    pub w_sqrt: Mat9,
}

/// Unique PSD square root; negative eigenvalues are clamped to zero.
pub fn psd_sqrt(w: &Mat9) -> Mat9 {
    let sym = (w + w.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let d = eig.eigenvalues.map(|x| x.max(0.0).sqrt());
    let q = eig.eigenvectors;
    let out = q * Mat9::from_diagonal(&d) * q.transpose();
    (out + out.transpose()) * 0.5
}

/// `W = V A V^T` with `A = diag(tangent, normal_scale * I_6)`.
pub fn lift_tangent_block(r_tilde: &RotationMatrix, tangent: &Mat3, opts: &WeightOptions) -> LiftedWeight {
    let basis = build_lifted_basis_scaled(r_tilde, opts.basis_scale);
    let mut a = Mat9::zeros();
    a.fixed_view_mut::<3, 3>(0, 0).copy_from(tangent);
    for i in 3..9 {
        a[(i, i)] = opts.normal_scale;
    }
    let w = basis.v * a * basis.v.transpose();
    let w = (w + w.transpose()) * 0.5;
    LiftedWeight { w_sqrt: psd_sqrt(&w), w }
}

pub fn build_weight(lm: &TwoViewLocalMin) -> LiftedWeight {
    build_weight_with(lm, &WeightOptions::default())
}

pub fn build_weight_with(lm: &TwoViewLocalMin, opts: &WeightOptions) -> LiftedWeight {
    let tangent = projected_gram(lm) * 0.5;
    lift_tangent_block(&lm.r_tilde, &tangent, opts)
}

/// Transposes the role of the two cameras: `vec(X^T)` as a permutation of `vec(X)`.
fn commutation() -> Mat9 {
    let mut t = Mat9::zeros();
    for a in 0..3 {
        for b in 0..3 {
            t[(b + 3 * a, a + 3 * b)] = 1.0;
        }
    }
    t
}

/// Packages a two-view result as a prior on `R_k R_l^T`.
///
/// The two-view problem must use camera `l` as the reference view and `k` as
/// the second view, so that its rotation estimates `R_k R_l^T`. The stored
/// prior always has `k < l`; a pair given as `k > l` is flipped to
/// `(l, k)` with the transposed estimate and permuted weight.
pub fn make_prior(k: usize, l: usize, lm: &TwoViewLocalMin, opts: &WeightOptions) -> Result<RotationPrior> {
    if k == l {
        return Err(Error::InvalidConfig("make_prior needs two distinct cameras".into()));
    }
    let w = build_weight_with(lm, opts);
    Ok(orient_prior(k, l, lm.r_tilde, w.w_sqrt))
}

fn orient_prior(k: usize, l: usize, r_tilde: RotationMatrix, w_sqrt: Mat9) -> RotationPrior {
    if k < l {
        RotationPrior { k, l, r_tilde, w_sqrt }
    } else {
        let t = commutation();
        RotationPrior {
            k: l,
            l: k,
            r_tilde: r_tilde.transpose(),
            w_sqrt: t * w_sqrt * t.transpose(),
        }
    }
}

/// Prior on `R_k R_l^T` synthesized from the true relative rotation with
/// isotropic angle-axis noise and a scaled identity tangent block.
pub fn synthetic_prior<R: Rng + ?Sized>(
    k: usize,
    l: usize,
    r_rel_gt: &RotationMatrix,
    angle_noise: f64,
    w_scale: f64,
    opts: &WeightOptions,
    rng: &mut R,
) -> RotationPrior {
    let r_tilde = if angle_noise > 0.0 {
        let eps = Vec3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal) * angle_noise);
        RotationMatrix::new_unchecked(RotationMatrix::exp(&eps).into_inner() * r_rel_gt.matrix())
    } else {
        *r_rel_gt
    };
    let w = lift_tangent_block(&r_tilde, &(Mat3::identity() * w_scale), opts);
    orient_prior(k, l, r_tilde, w.w_sqrt)
}

/// `vec(dR)^T W vec(dR)`.
pub fn lifted_penalty(w: &Mat9, delta: &Mat3) -> f64 {
    let v: Vec9 = vec_col_major(delta);
    (v.transpose() * w * v)[0]
}
