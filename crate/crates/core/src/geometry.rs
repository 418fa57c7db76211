//! Projective-geometry primitives: rotations, cameras, projection, fundamental
//! matrices and the essentiality measure.
//!
//! Homogeneous image vectors are never normalized; compare them with
//! [`parallel_defect`] rather than element-wise.

use nalgebra::{Matrix3, Matrix3x4, Matrix4, SVector, Vector2, Vector3, Vector4};

use crate::error::{Error, Result};

pub type Mat3 = Matrix3<f64>;
pub type Mat4 = Matrix4<f64>;
pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Vec4 = Vector4<f64>;
pub type Vec9 = SVector<f64, 9>;

/// Cartesian 3D point.
pub type Point3 = Vec3;

/// Relative singular-value cutoff used for rank decisions.
pub const RANK_RTOL: f64 = 1e-8;

/// Cross-product matrix `[v]_x`, so that `skew(v) * w == v.cross(&w)`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`] applied to the skew-symmetric part of `m`.
pub fn unskew(m: &Mat3) -> Vec3 {
    Vec3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Column-major vectorization: entry `(r, c)` lands at index `r + 3 c`.
pub fn vec_col_major(m: &Mat3) -> Vec9 {
    Vec9::from_column_slice(m.as_slice())
}

/// Inverse of [`vec_col_major`].
pub fn unvec_col_major(v: &Vec9) -> Mat3 {
    Mat3::from_column_slice(v.as_slice())
}

/// A proper rotation. Construction through [`RotationMatrix::new`] checks the
/// validity predicate; solver variables are plain matrices and never wrapped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(Mat3);

impl RotationMatrix {
    pub const ORTHO_TOL: f64 = 1e-9;

    pub fn identity() -> Self {
        Self(Mat3::identity())
    }

    pub fn new(r: Mat3) -> Result<Self> {
        if Self::is_valid(&r) {
            Ok(Self(r))
        } else {
            Err(Error::DegenerateConfiguration("matrix is not a rotation"))
        }
    }

    /// Wraps `r` without checking; callers guarantee it is a rotation.
    pub fn new_unchecked(r: Mat3) -> Self {
        Self(r)
    }

    pub fn is_valid(r: &Mat3) -> bool {
        r.iter().all(|x| x.is_finite())
            && (r * r.transpose() - Mat3::identity()).norm() <= Self::ORTHO_TOL
            && r.determinant() > 0.0
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn into_inner(self) -> Mat3 {
        self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    /// Closed-form exponential of `[xi]_x`.
    pub fn exp(xi: &Vec3) -> Self {
        let theta2 = xi.norm_squared();
        let k = skew(xi);
        let (a, b) = if theta2 < 1e-10 {
            // Taylor terms of sin(t)/t and (1 - cos t)/t^2
            (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
        } else {
            let theta = theta2.sqrt();
            (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
        };
        Self(Mat3::identity() + k * a + k * k * b)
    }

    /// Axis-angle vector of the rotation; fails near the cut locus.
    pub fn log(&self) -> Result<Vec3> {
        let r = &self.0;
        let tr = r.trace();
        if tr <= -1.0 + 1e-9 {
            return Err(Error::AngleNearPi);
        }
        let cos = ((tr - 1.0) * 0.5).clamp(-1.0, 1.0);
        let theta = cos.acos();
        let w = unskew(r);
        if theta < 1e-6 {
            // sin(t)/t ~ 1 - t^2/6
            return Ok(w * (1.0 + theta * theta / 6.0));
        }
        Ok(w * (theta / theta.sin()))
    }

    /// Geodesic angle between two rotations, in radians.
    pub fn angle_to(&self, other: &RotationMatrix) -> f64 {
        let rel = self.0.transpose() * other.0;
        let c = (rel.trace() - 1.0) * 0.5;
        unskew(&rel).norm().atan2(c)
    }
}

/// Closed-form exponential map, returned as a plain matrix.
pub fn rotation_exp(xi: &Vec3) -> RotationMatrix {
    RotationMatrix::exp(xi)
}

pub fn rotation_log(r: &RotationMatrix) -> Result<Vec3> {
    r.log()
}

/// Left Jacobian of the rotation exponential:
/// `exp(xi + d) ~ exp(jl(xi) d) exp(xi)` to first order.
pub fn so3_left_jacobian(xi: &Vec3) -> Mat3 {
    let theta2 = xi.norm_squared();
    let k = skew(xi);
    let (a, b) = if theta2 < 1e-10 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Mat3::identity() + k * a + k * k * b
}

/// Closest rotation in Frobenius norm (polar factor with determinant fix).
pub fn nearest_rotation(m: &Mat3) -> RotationMatrix {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut d = Mat3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    RotationMatrix(u * d * vt)
}

/// A 3x4 camera `[a | t]` with an unconstrained left block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraMatrix {
    pub a: Mat3,
    pub t: Vec3,
}

impl CameraMatrix {
    pub fn new(a: Mat3, t: Vec3) -> Self {
        Self { a, t }
    }

    pub fn identity() -> Self {
        Self::new(Mat3::identity(), Vec3::zeros())
    }

    pub fn from_matrix(p: &Matrix3x4<f64>) -> Self {
        Self::new(p.fixed_view::<3, 3>(0, 0).into_owned(), p.column(3).into_owned())
    }

    pub fn to_matrix(&self) -> Matrix3x4<f64> {
        let mut p = Matrix3x4::zeros();
        p.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.a);
        p.set_column(3, &self.t);
        p
    }

    /// Homogeneous image vector `a u + t` (unnormalized).
    pub fn project(&self, u: &Point3) -> Vec3 {
        self.a * u + self.t
    }

    /// Camera center `-a^{-1} t`.
    pub fn center(&self) -> Option<Vec3> {
        if self.a.determinant().abs() <= 1e-10 {
            return None;
        }
        self.a.try_inverse().map(|inv| -(inv * self.t))
    }
}

/// Free-function form of [`CameraMatrix::project`].
pub fn project(p: &CameraMatrix, x: &Point3) -> Vec3 {
    p.project(x)
}

/// `scale * rot * x + shift`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rot: RotationMatrix,
    pub shift: Vec3,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rot: RotationMatrix::identity(),
            shift: Vec3::zeros(),
        }
    }

    pub fn apply(&self, x: &Point3) -> Point3 {
        self.rot.matrix() * x * self.scale + self.shift
    }

    /// The 4x4 point transform of this similarity.
    pub fn to_homogeneous(&self) -> Mat4 {
        let mut h = Mat4::identity();
        h.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(self.rot.matrix() * self.scale));
        h.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.shift);
        h
    }
}

/// Invertible 4x4 transform acting on cameras from the right.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectiveTransform {
    h: Mat4,
}

impl ProjectiveTransform {
    pub fn new(h: Mat4) -> Result<Self> {
        if !h.determinant().is_finite() || h.determinant().abs() <= 1e-12 {
            return Err(Error::DegenerateConfiguration("projective transform is singular"));
        }
        Ok(Self { h })
    }

    pub fn identity() -> Self {
        Self { h: Mat4::identity() }
    }

    pub fn matrix(&self) -> &Mat4 {
        &self.h
    }

    pub fn inverse(&self) -> Mat4 {
        self.h.try_inverse().expect("checked invertible at construction")
    }
}

/// Maps `(P, U)` to `(P H, H^{-1} U)` and dehomogenizes the points.
pub fn apply_projective(
    h: &ProjectiveTransform,
    p: &CameraMatrix,
    pts: &[Point3],
) -> Result<(CameraMatrix, Vec<Point3>)> {
    let cam = CameraMatrix::from_matrix(&(p.to_matrix() * h.matrix()));
    let hinv = h.inverse();
    let pts = pts
        .iter()
        .map(|u| {
            let x = hinv * u.push(1.0);
            if x.w.abs() <= 1e-12 {
                Err(Error::PointAtInfinity(x.w))
            } else {
                Ok(x.xyz() / x.w)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((cam, pts))
}

/// `|a x b| / (|a| |b|)`: zero iff the two homogeneous vectors are parallel.
pub fn parallel_defect(a: &Vec3, b: &Vec3) -> f64 {
    let denom = a.norm() * b.norm();
    if denom == 0.0 {
        return 0.0;
    }
    a.cross(b).norm() / denom
}

/// Scales `m` to unit Frobenius norm with its largest-magnitude entry positive.
pub fn normalize_sign(m: &Mat3) -> Mat3 {
    let n = m.norm();
    let mut out = m / n;
    let (mut best, mut idx) = (0.0, 0);
    for (k, v) in out.iter().enumerate() {
        if v.abs() > best {
            best = v.abs();
            idx = k;
        }
    }
    if out[idx] < 0.0 {
        out = -out;
    }
    out
}

/// Fundamental matrix `A_j^{-T} [c_i - c_j]_x A_i^{-1}`, unit Frobenius norm.
///
/// Satisfies `x_j^T F x_i = 0` for joint projections `x_i = P_i U`, `x_j = P_j U`.
pub fn fundamental_matrix(p_i: &CameraMatrix, p_j: &CameraMatrix) -> Result<Mat3> {
    let inv = |p: &CameraMatrix, idx: usize| {
        if p.a.determinant().abs() <= 1e-10 {
            return Err(Error::SingularCamera(idx));
        }
        p.a.try_inverse().ok_or(Error::SingularCamera(idx))
    };
    let ai_inv = inv(p_i, 0)?;
    let aj_inv = inv(p_j, 1)?;
    let c_i = -(ai_inv * p_i.t);
    let c_j = -(aj_inv * p_j.t);
    let d = c_i - c_j;
    if d.norm() <= 1e-10 {
        return Err(Error::CoincidentCenters);
    }
    let f = aj_inv.transpose() * skew(&d) * ai_inv;
    Ok(normalize_sign(&f))
}

/// Normalized gap `(s1 - s2) / (s1 + s2)` of the two largest singular values.
pub fn essentiality_measure(f: &Mat3) -> Result<f64> {
    let mut s: Vec<f64> = f.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    let sum = s[0] + s[1];
    if !(sum > 1e-12) {
        return Err(Error::DegenerateMatrix);
    }
    Ok((s[0] - s[1]) / sum)
}

/// Least-squares similarity mapping `src` onto `dst` (Umeyama).
pub fn align_similarity(src: &[Point3], dst: &[Point3]) -> Result<SimilarityTransform> {
    if src.len() != dst.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} source vs {} target points",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Err(Error::DegenerateConfiguration("need at least 3 correspondences"));
    }
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vec3>() / n;
    let mu_d = dst.iter().sum::<Vec3>() / n;
    let mut cov = Mat3::zeros();
    let mut cov_src = Mat3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let ds = s - mu_s;
        let dd = d - mu_d;
        cov += dd * ds.transpose();
        cov_src += ds * ds.transpose();
        var_s += ds.norm_squared();
    }
    let mut spread: Vec<f64> = cov_src.symmetric_eigenvalues().iter().copied().collect();
    spread.sort_by(|a, b| b.total_cmp(a));
    if !(spread[0] > 1e-24) || spread[1] <= 1e-10 * spread[0] {
        return Err(Error::DegenerateConfiguration("points are collinear or coincident"));
    }
    cov /= n;
    var_s /= n;
    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut d = Mat3::identity();
    if u.determinant() * vt.determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rot = u * d * vt;
    let trace_ds: f64 = (0..3).map(|k| svd.singular_values[k] * d[(k, k)]).sum();
    let scale = trace_ds / var_s;
    let shift = mu_d - rot * mu_s * scale;
    Ok(SimilarityTransform {
        scale,
        rot: RotationMatrix(rot),
        shift,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn randn3(r: &mut ChaCha8Rng) -> Vec3 {
        Vec3::from_fn(|_, _| r.sample(StandardNormal))
    }

    fn randn33(r: &mut ChaCha8Rng) -> Mat3 {
        Mat3::from_fn(|_, _| r.sample(StandardNormal))
    }

    fn random_rotation(r: &mut ChaCha8Rng) -> RotationMatrix {
        nearest_rotation(&randn33(r))
    }

    #[test]
    fn project_identity_and_translation() {
        let p = CameraMatrix::identity();
        assert_eq!(project(&p, &Vec3::new(0.0, 0.0, 1.0)), Vec3::new(0.0, 0.0, 1.0));
        let p = CameraMatrix::new(Mat3::identity(), Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(project(&p, &Vec3::zeros()), Vec3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn project_matches_elementwise_dot_products() {
        let mut r = rng(1);
        for _ in 0..20 {
            let p = CameraMatrix::new(randn33(&mut r), randn3(&mut r));
            let u = randn3(&mut r);
            let got = project(&p, &u);
            for row in 0..3 {
                let mut want = p.t[row];
                for col in 0..3 {
                    want += p.a[(row, col)] * u[col];
                }
                assert_relative_eq!(got[row], want, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn apply_projective_identity_and_similarity() {
        let mut r = rng(2);
        let p = CameraMatrix::new(randn33(&mut r), randn3(&mut r));
        let pts: Vec<Vec3> = (0..5).map(|_| randn3(&mut r)).collect();
        let (p2, pts2) = apply_projective(&ProjectiveTransform::identity(), &p, &pts).unwrap();
        assert_eq!(p2, p);
        assert_eq!(pts2, pts);

        let sim = SimilarityTransform {
            scale: 2.0,
            rot: random_rotation(&mut r),
            shift: randn3(&mut r),
        };
        let h = ProjectiveTransform::new(sim.to_homogeneous()).unwrap();
        let (p2, pts2) = apply_projective(&h, &p, &pts).unwrap();
        for (u, v) in pts.iter().zip(&pts2) {
            assert!(parallel_defect(&p.project(u), &p2.project(v)) < 1e-12);
        }
    }

    #[test]
    fn apply_projective_random_preserves_image_rays() {
        let mut r = rng(3);
        for _ in 0..20 {
            let h = ProjectiveTransform::new(Mat4::from_fn(|_, _| r.sample(StandardNormal))).unwrap();
            let p = CameraMatrix::new(randn33(&mut r), randn3(&mut r));
            let pts: Vec<Vec3> = (0..10).map(|_| randn3(&mut r)).collect();
            let Ok((p2, pts2)) = apply_projective(&h, &p, &pts) else { continue };
            for (u, v) in pts.iter().zip(&pts2) {
                assert!(parallel_defect(&p.project(u), &p2.project(v)) < 1e-8);
            }
        }
    }

    #[test]
    fn apply_projective_rejects_points_at_infinity() {
        // H^{-1} sends (0,0,0,1) to w = 0 when the last row of H^{-1} is (1,0,0,0)
        let hinv = Mat4::new(
            0.0, 0.0, 0.0, 1.0, //
            0.0, 1.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, 0.0, //
            1.0, 0.0, 0.0, 0.0,
        );
        let h = ProjectiveTransform::new(hinv.try_inverse().unwrap()).unwrap();
        let res = apply_projective(&h, &CameraMatrix::identity(), &[Vec3::zeros()]);
        assert!(matches!(res, Err(Error::PointAtInfinity(_))));
    }

    #[test]
    fn fundamental_pure_translation() {
        let pi = CameraMatrix::identity();
        let pj = CameraMatrix::new(Mat3::identity(), Vec3::new(1.0, 0.0, 0.0));
        let f = fundamental_matrix(&pi, &pj).unwrap();
        let want = normalize_sign(&skew(&Vec3::x()));
        assert_relative_eq!(f, want, epsilon = 1e-12);
    }

    #[test]
    fn fundamental_epipolar_constraint_and_rank() {
        let mut r = rng(4);
        for _ in 0..20 {
            let pi = CameraMatrix::new(randn33(&mut r), randn3(&mut r));
            let pj = CameraMatrix::new(randn33(&mut r), randn3(&mut r));
            let f = fundamental_matrix(&pi, &pj).unwrap();
            let s = f.singular_values();
            assert!(s.min() <= 1e-8);
            for _ in 0..10 {
                let u = randn3(&mut r);
                let xi = pi.project(&u).normalize();
                let xj = pj.project(&u).normalize();
                assert!((xj.transpose() * f * xi)[0].abs() < 1e-8);
            }
        }
    }

    #[test]
    fn fundamental_is_projectively_invariant() {
        let mut r = rng(5);
        for _ in 0..20 {
            let pi = CameraMatrix::new(randn33(&mut r), randn3(&mut r));
            let pj = CameraMatrix::new(randn33(&mut r), randn3(&mut r));
            let h = Mat4::from_fn(|_, _| r.sample(StandardNormal));
            let f = fundamental_matrix(&pi, &pj).unwrap();
            let qi = CameraMatrix::from_matrix(&(pi.to_matrix() * h));
            let qj = CameraMatrix::from_matrix(&(pj.to_matrix() * h));
            let g = fundamental_matrix(&qi, &qj).unwrap();
            let d = (f - g).norm().min((f + g).norm());
            assert!(d <= 1e-6, "{d}");
        }
    }

    #[test]
    fn fundamental_errors() {
        let singular = CameraMatrix::new(Mat3::zeros(), Vec3::x());
        assert!(matches!(
            fundamental_matrix(&singular, &CameraMatrix::identity()),
            Err(Error::SingularCamera(0))
        ));
        assert!(matches!(
            fundamental_matrix(&CameraMatrix::identity(), &CameraMatrix::identity()),
            Err(Error::CoincidentCenters)
        ));
    }

    #[test]
    fn essentiality_examples() {
        assert_relative_eq!(
            essentiality_measure(&Mat3::from_diagonal(&Vec3::new(2.0, 1.0, 0.0))).unwrap(),
            1.0 / 3.0,
            epsilon = 1e-15
        );
        assert_relative_eq!(
            essentiality_measure(&Mat3::from_diagonal(&Vec3::new(1.0, 0.0, 0.0))).unwrap(),
            1.0
        );
        assert!(matches!(
            essentiality_measure(&Mat3::zeros()),
            Err(Error::DegenerateMatrix)
        ));
        let mut r = rng(6);
        for _ in 0..20 {
            let pi = CameraMatrix::new(*random_rotation(&mut r).matrix(), randn3(&mut r));
            let pj = CameraMatrix::new(*random_rotation(&mut r).matrix(), randn3(&mut r));
            let e = fundamental_matrix(&pi, &pj).unwrap();
            assert!(essentiality_measure(&e).unwrap() <= 1e-8);
        }
    }

    #[test]
    fn rotation_exp_examples() {
        assert_eq!(*rotation_exp(&Vec3::zeros()).matrix(), Mat3::identity());
        let r = rotation_exp(&Vec3::new(std::f64::consts::FRAC_PI_2, 0.0, 0.0));
        assert_relative_eq!(r.matrix() * Vec3::y(), Vec3::z(), epsilon = 1e-15);
    }

    #[test]
    fn rotation_log_round_trip() {
        let mut r = rng(7);
        for _ in 0..200 {
            let mut xi = randn3(&mut r);
            let n = xi.norm();
            if n >= 2.0 {
                xi *= 1.9 / n;
            }
            let back = rotation_log(&rotation_exp(&xi)).unwrap();
            assert!((back - xi).norm() <= 1e-10);
        }
        let half_turn = rotation_exp(&Vec3::new(std::f64::consts::PI, 0.0, 0.0));
        assert!(matches!(rotation_log(&half_turn), Err(Error::AngleNearPi)));
    }

    #[test]
    fn left_jacobian_matches_finite_differences() {
        let mut r = rng(8);
        let xi = randn3(&mut r);
        let d = randn3(&mut r) * 1e-6;
        let lhs = *rotation_exp(&(xi + d)).matrix();
        let rhs = rotation_exp(&(so3_left_jacobian(&xi) * d)).matrix() * rotation_exp(&xi).matrix();
        assert!((lhs - rhs).norm() < 1e-11);
    }

    #[test]
    fn align_similarity_examples() {
        let mut r = rng(9);
        let src: Vec<Vec3> = (0..10).map(|_| randn3(&mut r)).collect();
        let id = align_similarity(&src, &src).unwrap();
        assert_relative_eq!(id.scale, 1.0, epsilon = 1e-12);
        assert_relative_eq!(*id.rot.matrix(), Mat3::identity(), epsilon = 1e-12);
        assert!(id.shift.norm() < 1e-12);

        let dst: Vec<Vec3> = src.iter().map(|p| p * 2.0).collect();
        let s = align_similarity(&src, &dst).unwrap();
        assert_relative_eq!(s.scale, 2.0, epsilon = 1e-12);
        assert_relative_eq!(*s.rot.matrix(), Mat3::identity(), epsilon = 1e-12);
        assert!(s.shift.norm() < 1e-12);

        let truth = SimilarityTransform {
            scale: 0.7,
            rot: random_rotation(&mut r),
            shift: randn3(&mut r),
        };
        let dst: Vec<Vec3> = src.iter().map(|p| truth.apply(p)).collect();
        let got = align_similarity(&src, &dst).unwrap();
        assert!((got.scale - truth.scale).abs() < 1e-8);
        assert!((got.rot.matrix() - truth.rot.matrix()).norm() < 1e-8);
        assert!((got.shift - truth.shift).norm() < 1e-8);

        let line: Vec<Vec3> = (0..5).map(|k| Vec3::x() * k as f64).collect();
        assert!(matches!(
            align_similarity(&line, &line),
            Err(Error::DegenerateConfiguration(_))
        ));
    }

    proptest::proptest! {
        #[test]
        fn exp_is_always_a_rotation(x in -10.0..10.0f64, y in -10.0..10.0f64, z in -10.0..10.0f64) {
            let r = rotation_exp(&Vec3::new(x, y, z));
            proptest::prop_assert!(RotationMatrix::is_valid(r.matrix()));
        }
    }
}
