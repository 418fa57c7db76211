//! Residual blocks and Jacobians of the combined objective
//!
//! ```text
//! sum_obs (1-eta) l_ose + eta l_aff  +  sum_priors l_rot
//! ```
//!
//! # Layout
//!
//! Residuals are stacked observation by observation (two OSE rows scaled by
//! `sqrt(1-eta)`, then one affine row scaled by `sqrt(eta)`), followed by nine
//! rows per active prior in prior-list order.
//!
//! Columns of `J` (camera blocks, `b`) are camera-major; inside a camera the
//! nine entries of `a` are column-major (`a[(r, c)]` at `r + 3 c`).
//! Columns of `K` (`v`) hold the points first (`u_j` at `3 j..3 j + 3`) and
//! then the translations (`t_i` at `3 n_pts + 3 i..`).

use nalgebra::{DMatrix, DVector, SMatrix};

use crate::error::{Error, Result};
use crate::geometry::{
    skew, so3_left_jacobian, vec_col_major, CameraMatrix, Mat3, Point3, RotationMatrix, Vec2,
    Vec3, Vec9,
};

pub type Mat9 = SMatrix<f64, 9, 9>;
pub type Mat9x3 = SMatrix<f64, 9, 3>;

/// How camera left blocks are parametrized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parametrization {
    /// Nine free entries per camera.
    #[default]
    FreeMatrix,
    /// `exp([w]_x)` with a free 3-vector `w` per camera.
    ExponentialMap,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub eta: f64,
    pub include_rot: bool,
    pub include_diag: bool,
    pub parametrization: Parametrization,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            eta: 0.05,
            include_rot: true,
            include_diag: false,
            parametrization: Parametrization::FreeMatrix,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::InvalidConfig(format!("eta must lie in (0,1), got {}", self.eta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub cam: usize,
    pub pt: usize,
    pub m: Vec2,
}

/// Relative-rotation measurement `R_k R_l^T ~ r_tilde` with a 9x9 weight root.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationPrior {
    pub k: usize,
    pub l: usize,
    pub r_tilde: RotationMatrix,
    pub w_sqrt: Mat9,
}

impl RotationPrior {
    /// The self term `||R_k R_k^T - I||^2`.
    pub fn self_pair(k: usize) -> Self {
        Self {
            k,
            l: k,
            r_tilde: RotationMatrix::identity(),
            w_sqrt: Mat9::identity(),
        }
    }

    pub fn is_self(&self) -> bool {
        self.k == self.l
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub n_cams: usize,
    pub n_pts: usize,
    pub observations: Vec<Observation>,
    pub priors: Vec<RotationPrior>,
    pub config: ObjectiveConfig,
}

impl Problem {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let mut cam_seen = vec![false; self.n_cams];
        let mut pt_views = vec![0usize; self.n_pts];
        for (idx, o) in self.observations.iter().enumerate() {
            if o.cam >= self.n_cams || o.pt >= self.n_pts {
                return Err(Error::DimensionMismatch(format!(
                    "observation {idx} references camera {} / point {}",
                    o.cam, o.pt
                )));
            }
            if !(o.m.x.is_finite() && o.m.y.is_finite()) {
                return Err(Error::InvalidConfig(format!("observation {idx} is not finite")));
            }
            cam_seen[o.cam] = true;
            pt_views[o.pt] += 1;
        }
        if let Some(i) = cam_seen.iter().position(|s| !s) {
            return Err(Error::InvalidConfig(format!("camera {i} has no observations")));
        }
        if let Some(j) = pt_views.iter().position(|&v| v < 2) {
            return Err(Error::InvalidConfig(format!("point {j} is seen by fewer than 2 cameras")));
        }
        let mut has_self = vec![false; self.n_cams];
        for (idx, p) in self.priors.iter().enumerate() {
            if p.k > p.l || p.l >= self.n_cams {
                return Err(Error::InvalidConfig(format!(
                    "prior {idx} has invalid pair ({}, {})",
                    p.k, p.l
                )));
            }
            if p.is_self() {
                has_self[p.k] = true;
            }
        }
        if self.config.include_rot {
            if let Some(k) = has_self.iter().position(|s| !s) {
                return Err(Error::InvalidConfig(format!("missing self prior for camera {k}")));
            }
        }
        Ok(())
    }

    /// Priors that contribute residuals under the current configuration.
    pub fn active_priors(&self) -> Vec<RotationPrior> {
        if self.config.include_rot {
            self.priors.clone()
        } else if self.config.include_diag {
            (0..self.n_cams).map(RotationPrior::self_pair).collect()
        } else {
            Vec::new()
        }
    }

    pub fn with_config(&self, config: ObjectiveConfig) -> Self {
        Self {
            config,
            ..self.clone()
        }
    }

    pub fn n_residuals(&self) -> usize {
        3 * self.observations.len() + 9 * self.active_priors().len()
    }

    /// Observation indices grouped by point.
    pub fn observations_by_point(&self) -> Vec<Vec<usize>> {
        let mut by_pt = vec![Vec::new(); self.n_pts];
        for (idx, o) in self.observations.iter().enumerate() {
            by_pt[o.pt].push(idx);
        }
        by_pt
    }
}

/// Camera blocks `b`, translations `t` and points `c` of a full solution.
#[derive(Debug, Clone, PartialEq)]
pub struct Variables {
    pub b: Vec<Mat3>,
    pub t: Vec<Vec3>,
    pub c: Vec<Point3>,
}

impl Variables {
    pub fn zeros(n_cams: usize, n_pts: usize) -> Self {
        Self {
            b: vec![Mat3::zeros(); n_cams],
            t: vec![Vec3::zeros(); n_cams],
            c: vec![Vec3::zeros(); n_pts],
        }
    }

    pub fn from_cameras(cams: &[CameraMatrix], pts: Vec<Point3>) -> Self {
        Self {
            b: cams.iter().map(|p| p.a).collect(),
            t: cams.iter().map(|p| p.t).collect(),
            c: pts,
        }
    }

    pub fn n_cams(&self) -> usize {
        self.b.len()
    }

    pub fn n_pts(&self) -> usize {
        self.c.len()
    }

    pub fn camera(&self, i: usize) -> CameraMatrix {
        CameraMatrix::new(self.b[i], self.t[i])
    }

    pub fn cameras(&self) -> Vec<CameraMatrix> {
        (0..self.n_cams()).map(|i| self.camera(i)).collect()
    }

    /// `vec(B)` in the `J` column layout.
    pub fn b_vector(&self) -> DVector<f64> {
        DVector::from_iterator(9 * self.n_cams(), self.b.iter().flat_map(|a| a.iter().copied()))
    }

    /// `v` in the `K` column layout: points, then translations.
    pub fn v_vector(&self) -> DVector<f64> {
        DVector::from_iterator(
            3 * (self.n_pts() + self.n_cams()),
            self.c.iter().chain(self.t.iter()).flat_map(|x| x.iter().copied()),
        )
    }

    pub fn from_vectors(b: &DVector<f64>, v: &DVector<f64>, n_cams: usize, n_pts: usize) -> Self {
        Self {
            b: (0..n_cams)
                .map(|i| Mat3::from_column_slice(&b.as_slice()[9 * i..9 * i + 9]))
                .collect(),
            t: (0..n_cams)
                .map(|i| Vec3::from_column_slice(&v.as_slice()[3 * (n_pts + i)..3 * (n_pts + i) + 3]))
                .collect(),
            c: (0..n_pts)
                .map(|j| Vec3::from_column_slice(&v.as_slice()[3 * j..3 * j + 3]))
                .collect(),
        }
    }

    pub fn check_dims(&self, prob: &Problem) -> Result<()> {
        if self.b.len() != prob.n_cams || self.t.len() != prob.n_cams || self.c.len() != prob.n_pts {
            return Err(Error::DimensionMismatch(format!(
                "variables have {}/{} cameras and {} points, problem has {} cameras and {} points",
                self.b.len(),
                self.t.len(),
                self.c.len(),
                prob.n_cams,
                prob.n_pts
            )));
        }
        Ok(())
    }

    /// Applies `P <- P H`, `u <- R^T (u - d)` for `H = [[R, d], [0, 1]]`.
    pub fn rigid_transformed(&self, rot: &Mat3, d: &Vec3) -> Self {
        Self {
            b: self.b.iter().map(|a| a * rot).collect(),
            t: self.b.iter().zip(&self.t).map(|(a, t)| a * d + t).collect(),
            c: self.c.iter().map(|u| rot.transpose() * (u - d)).collect(),
        }
    }
}

/// `m * (P^3 U) - P^{1:2} U`.
pub fn residual_ose(p: &CameraMatrix, u: &Point3, m: &Vec2) -> Vec2 {
    ose_from_image(&p.project(u), m)
}

pub fn ose_from_image(x: &Vec3, m: &Vec2) -> Vec2 {
    m * x.z - x.xy()
}

/// `(m^T P^{1:2} U + P^3 U) / (|m|^2 + 1) - 1`.
pub fn residual_aff(p: &CameraMatrix, u: &Point3, m: &Vec2) -> f64 {
    aff_from_image(&p.project(u), m)
}

pub fn aff_from_image(x: &Vec3, m: &Vec2) -> f64 {
    (m.dot(&x.xy()) + x.z) / (m.norm_squared() + 1.0) - 1.0
}

/// `sqrt(W) vec(r_k r_l^T - r_tilde)`.
pub fn residual_rot(r_k: &Mat3, r_l: &Mat3, prior: &RotationPrior) -> Vec9 {
    prior.w_sqrt * vec_col_major(&(r_k * r_l.transpose() - prior.r_tilde.matrix()))
}

/// `vec(r_k r_k^T - I)`.
pub fn residual_diag(r_k: &Mat3) -> Vec9 {
    vec_col_major(&(r_k * r_k.transpose() - Mat3::identity()))
}

/// Weighted observation residual as an affine map of the image vector:
/// `rho = L x - d` with `d = (0, 0, sqrt(eta))`.
pub fn observation_map(m: &Vec2, eta: f64) -> Mat3 {
    let so = (1.0 - eta).sqrt();
    let sa = eta.sqrt() / (m.norm_squared() + 1.0);
    Mat3::new(
        -so, 0.0, so * m.x, //
        0.0, -so, so * m.y, //
        sa * m.x, sa * m.y, sa,
    )
}

pub fn observation_residual(x: &Vec3, m: &Vec2, eta: f64) -> Vec3 {
    let mut r = observation_map(m, eta) * x;
    r.z -= eta.sqrt();
    r
}

/// Derivatives of `vec(r_k r_l^T)` with respect to `vec(r_k)` and `vec(r_l)`.
pub fn rot_pair_derivatives(r_k: &Mat3, r_l: &Mat3) -> (Mat9, Mat9) {
    let mut dk = Mat9::zeros();
    let mut dl = Mat9::zeros();
    for a in 0..3 {
        for b in 0..3 {
            let row = a + 3 * b;
            for d in 0..3 {
                // d(R_k R_l^T)_{ab} / d(R_k)_{a d} = (R_l)_{b d}
                dk[(row, a + 3 * d)] += r_l[(b, d)];
                // d(R_k R_l^T)_{ab} / d(R_l)_{b d} = (R_k)_{a d}
                dl[(row, b + 3 * d)] += r_k[(a, d)];
            }
        }
    }
    (dk, dl)
}

/// Weighted Jacobians of one prior residual with respect to the two camera blocks.
/// For a self pair the two are summed into the first and the second is zero.
pub fn prior_jacobians(prior: &RotationPrior, r_k: &Mat3, r_l: &Mat3) -> (Mat9, Mat9) {
    let (dk, dl) = rot_pair_derivatives(r_k, r_l);
    if prior.is_self() {
        (prior.w_sqrt * (dk + dl), Mat9::zeros())
    } else {
        (prior.w_sqrt * dk, prior.w_sqrt * dl)
    }
}

/// `d vec(exp([w]_x)) / dw`, a 9x3 matrix.
pub fn exp_block_jacobian(omega: &Vec3) -> Mat9x3 {
    let r = crate::geometry::rotation_exp(omega).into_inner();
    let jl = so3_left_jacobian(omega);
    let mut out = Mat9x3::zeros();
    for k in 0..3 {
        let col = vec_col_major(&(skew(&jl.column(k).into_owned()) * r));
        out.set_column(k, &col);
    }
    out
}

/// Stacked residual vector in the documented order.
pub fn assemble_residuals(prob: &Problem, vars: &Variables) -> Result<DVector<f64>> {
    vars.check_dims(prob)?;
    let eta = prob.config.eta;
    let priors = prob.active_priors();
    let mut r = DVector::zeros(3 * prob.observations.len() + 9 * priors.len());
    for (idx, o) in prob.observations.iter().enumerate() {
        let x = vars.camera(o.cam).project(&vars.c[o.pt]);
        r.fixed_rows_mut::<3>(3 * idx)
            .copy_from(&observation_residual(&x, &o.m, eta));
    }
    let base = 3 * prob.observations.len();
    for (idx, p) in priors.iter().enumerate() {
        r.fixed_rows_mut::<9>(base + 9 * idx)
            .copy_from(&residual_rot(&vars.b[p.k], &vars.b[p.l], p));
    }
    Ok(r)
}

/// Sparse matrix as `(row, col, value)` entries. Entries are unique.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplets {
    pub nrows: usize,
    pub ncols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl Triplets {
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for &(r, c, v) in &self.entries {
            m[(r, c)] += v;
        }
        m
    }
}

/// Analytic Jacobians `J = dr/db` and `K = dr/dv` in triplet form.
pub fn jacobians(prob: &Problem, vars: &Variables) -> Result<(Triplets, Triplets)> {
    vars.check_dims(prob)?;
    let eta = prob.config.eta;
    let priors = prob.active_priors();
    let nrows = 3 * prob.observations.len() + 9 * priors.len();
    let mut j = Triplets {
        nrows,
        ncols: 9 * prob.n_cams,
        entries: Vec::new(),
    };
    let mut k = Triplets {
        nrows,
        ncols: 3 * (prob.n_pts + prob.n_cams),
        entries: Vec::new(),
    };
    for (idx, o) in prob.observations.iter().enumerate() {
        let l = observation_map(&o.m, eta);
        let u = vars.c[o.pt];
        let a = vars.b[o.cam];
        let la = l * a;
        for row in 0..3 {
            let r = 3 * idx + row;
            // d(a u)/d a_{q c} = e_q u_c
            for c in 0..3 {
                for q in 0..3 {
                    j.entries.push((r, 9 * o.cam + q + 3 * c, l[(row, q)] * u[c]));
                }
            }
            for c in 0..3 {
                k.entries.push((r, 3 * o.pt + c, la[(row, c)]));
                k.entries.push((r, 3 * (prob.n_pts + o.cam) + c, l[(row, c)]));
            }
        }
    }
    let base = 3 * prob.observations.len();
    for (idx, p) in priors.iter().enumerate() {
        let (jk, jl) = prior_jacobians(p, &vars.b[p.k], &vars.b[p.l]);
        for row in 0..9 {
            for col in 0..9 {
                j.entries.push((base + 9 * idx + row, 9 * p.k + col, jk[(row, col)]));
                if !p.is_self() {
                    j.entries.push((base + 9 * idx + row, 9 * p.l + col, jl[(row, col)]));
                }
            }
        }
    }
    Ok((j, k))
}

/// Per-term objective values.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectiveBreakdown {
    /// Unweighted sum of OSE terms.
    pub ose: f64,
    /// Unweighted sum of affine terms.
    pub aff: f64,
    /// Relative-rotation terms (including self pairs when rotation priors are on).
    pub rot: f64,
    /// Orthogonality terms, only when the diagonal variant is configured.
    pub diag: f64,
    /// `(1 - eta) ose + eta aff`.
    pub l_pose: f64,
    pub total: f64,
}

pub fn objective_value(prob: &Problem, vars: &Variables) -> Result<ObjectiveBreakdown> {
    vars.check_dims(prob)?;
    let eta = prob.config.eta;
    let mut out = ObjectiveBreakdown::default();
    for o in &prob.observations {
        let x = vars.camera(o.cam).project(&vars.c[o.pt]);
        out.ose += ose_from_image(&x, &o.m).norm_squared();
        out.aff += aff_from_image(&x, &o.m).powi(2);
    }
    let prior_sum: f64 = prob
        .active_priors()
        .iter()
        .map(|p| residual_rot(&vars.b[p.k], &vars.b[p.l], p).norm_squared())
        .sum();
    if prob.config.include_rot {
        out.rot = prior_sum;
    } else {
        out.diag = prior_sum;
    }
    out.l_pose = (1.0 - eta) * out.ose + eta * out.aff;
    out.total = out.l_pose + out.rot + out.diag;
    Ok(out)
}
