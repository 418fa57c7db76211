//! Stratified metric upgrade of calibrated projective reconstructions.
//!
//! Solves `P_i Omega P_i^T ~ I` for the symmetric 4x4 `Omega = H_{1:3} H_{1:3}^T`
//! and completes `H` with the null direction of `Omega`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::geometry::{apply_projective, CameraMatrix, Mat3, Mat4, Point3, ProjectiveTransform, Vec4};

/// Relative eigenvalue tolerance for the rank-3 signature test.
pub const SIGNATURE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct UpgradeResult {
    pub omega: Mat4,
    /// Smallest singular value of the normalized linear system.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub h: ProjectiveTransform,
    /// False when a negative eigenvalue beyond tolerance had to be flipped to
    /// build `H`; the upgrade is then not a valid metric reconstruction.
    pub realizable: bool,
    /// Eigenvalues of `Omega` in descending order.
    pub eigenvalues: Vec4,
}

/// Index pairs of the ten parameters: diagonal first, then the upper triangle.
const PARAMS: [(usize, usize); 10] = [
    (0, 0),
    (1, 1),
    (2, 2),
    (3, 3),
    (0, 1),
    (0, 2),
    (0, 3),
    (1, 2),
    (1, 3),
    (2, 3),
];

/// Symmetric basis element with unit Frobenius norm.
fn basis(idx: usize) -> Mat4 {
    let (a, b) = PARAMS[idx];
    let mut m = Mat4::zeros();
    if a == b {
        m[(a, a)] = 1.0;
    } else {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        m[(a, b)] = s;
        m[(b, a)] = s;
    }
    m
}

/// Least-squares `Omega` from five homogeneous equations per camera: the
/// three off-diagonal entries of `P Omega P^T` vanish and its diagonal
/// entries are equal. Cameras are scaled to unit Frobenius norm first, so the
/// result does not depend on their individual scales.
pub fn estimate_omega(cams: &[CameraMatrix]) -> Result<UpgradeResult> {
    if cams.len() < 3 {
        return Err(Error::InsufficientCameras(cams.len()));
    }
    let mut a = DMatrix::<f64>::zeros(5 * cams.len(), 10);
    for (i, cam) in cams.iter().enumerate() {
        let p = cam.to_matrix();
        let n = p.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::NotUpgradable(format!("camera {i} is zero or not finite")));
        }
        let p = p / n;
        for c in 0..10 {
            let m: Mat3 = p * basis(c) * p.transpose();
            let rows = [
                m[(0, 1)],
                m[(0, 2)],
                m[(1, 2)],
                m[(0, 0)] - m[(1, 1)],
                m[(1, 1)] - m[(2, 2)],
            ];
            for (r, v) in rows.iter().enumerate() {
                a[(5 * i + r, c)] = *v;
            }
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(Error::LinearSolveFailure)?;
    let (idx, residual) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .map(|(i, s)| (i, *s))
        .ok_or(Error::LinearSolveFailure)?;
    let mut omega = Mat4::zeros();
    for c in 0..10 {
        omega += basis(c) * v_t[(idx, c)];
    }
    if omega.trace() < 0.0 {
        omega = -omega;
    }
    Ok(UpgradeResult { omega, residual })
}

/// Factors `Omega = H_{1:3} H_{1:3}^T` from its eigendecomposition.
///
/// The three eigenvalues of largest magnitude form `H_{1:3}`; the remaining
/// eigenvector (the plane at infinity) is the fourth column, scaled to give
/// `det H = 1`. Negative eigenvalues among the three are flipped and reported
/// through `realizable` when they exceed `SIGNATURE_TOL` relative to the largest.
pub fn extract_h(omega: &Mat4) -> Result<Extraction> {
    if (omega - omega.transpose()).norm() > 1e-9 * omega.norm().max(1.0) {
        return Err(Error::NotUpgradable("omega is not symmetric".into()));
    }
    let sym = (omega + omega.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
    let eigenvalues = Vec4::from_fn(|r, _| eig.eigenvalues[order[r]]);
    let top = eigenvalues[0];
    if !(top > 0.0) {
        return Err(Error::NotUpgradable("omega has no positive eigenvalue".into()));
    }
    let mut by_mag = order.clone();
    by_mag.sort_by(|&x, &y| eig.eigenvalues[y].abs().total_cmp(&eig.eigenvalues[x].abs()));
    let (three, null) = (&by_mag[..3], by_mag[3]);
    if eig.eigenvalues[three[2]].abs() <= SIGNATURE_TOL * top {
        return Err(Error::NotUpgradable("omega has rank below 3".into()));
    }
    let mut realizable = true;
    let mut h = Mat4::zeros();
    for (col, &k) in three.iter().enumerate() {
        let lam = eig.eigenvalues[k];
        if lam < -SIGNATURE_TOL * top {
            realizable = false;
        }
        h.set_column(col, &(eig.eigenvectors.column(k) * lam.abs().sqrt()));
    }
    h.set_column(3, &eig.eigenvectors.column(null));
    let det = h.determinant();
    if !(det.abs() > 0.0) {
        return Err(Error::NotUpgradable("completed transform is singular".into()));
    }
    let col = h.column(3) / det;
    h.set_column(3, &col);
    Ok(Extraction {
        h: ProjectiveTransform::new(h)?,
        realizable,
        eigenvalues,
    })
}

/// `|M / s - I|_F` for `M = A A^T` at the best scale `s`.
pub fn orthogonality_defect(a: &Mat3) -> f64 {
    let m = a * a.transpose();
    let nn = m.norm_squared();
    if nn == 0.0 {
        return 3f64.sqrt();
    }
    // the closed form sqrt(3 - tr^2 / |M|^2) loses half the digits
    (m * (m.trace() / nn) - Mat3::identity()).norm()
}

/// Applies `H` to all cameras and points and returns the mean orthogonality
/// defect of the new camera blocks.
pub fn apply_upgrade(
    cams: &[CameraMatrix],
    pts: &[Point3],
    h: &ProjectiveTransform,
) -> Result<(Vec<CameraMatrix>, Vec<Point3>, f64)> {
    let mut out = Vec::with_capacity(cams.len());
    let mut new_pts = Vec::new();
    for (i, cam) in cams.iter().enumerate() {
        let (c, p) = apply_projective(h, cam, if i == 0 { pts } else { &[] })?;
        if i == 0 {
            new_pts = p;
        }
        out.push(c);
    }
    if cams.is_empty() {
        new_pts = apply_projective(h, &CameraMatrix::identity(), pts)?.1;
    }
    let defect = if out.is_empty() {
        0.0
    } else {
        out.iter().map(|c| orthogonality_defect(&c.a)).sum::<f64>() / out.len() as f64
    };
    Ok((out, new_pts, defect))
}

/// 4x4 with the given signature pattern on an orthonormal basis; used to build
/// unrealizable test cases.
pub fn omega_from_eigen(eigenvalues: &Vec4, basis: &Mat4) -> Mat4 {
    basis * Mat4::from_diagonal(eigenvalues) * basis.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{essentiality_measure, fundamental_matrix, rotation_exp, Vec3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn calibrated(rng: &mut ChaCha8Rng, n: usize) -> (Vec<CameraMatrix>, Vec<Point3>) {
        let mut g = || Vec3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let cams = (0..n)
            .map(|_| {
                let r = rotation_exp(&g()).into_inner();
                CameraMatrix::new(r, g() + Vec3::new(0.0, 0.0, 6.0))
            })
            .collect();
        let pts = (0..20).map(|_| g() * 0.5).collect();
        (cams, pts)
    }

    fn random_h(rng: &mut ChaCha8Rng) -> Mat4 {
        loop {
            let h = Mat4::identity() + Mat4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal) * 0.3);
            if h.determinant().abs() > 0.1 {
                return h;
            }
        }
    }

    fn mean_essentiality(cams: &[CameraMatrix]) -> f64 {
        let mut acc = Vec::new();
        for i in 0..cams.len() {
            for j in i + 1..cams.len() {
                let f = fundamental_matrix(&cams[i], &cams[j]).unwrap();
                acc.push(essentiality_measure(&f).unwrap());
            }
        }
        acc.iter().sum::<f64>() / acc.len() as f64
    }

    fn normalized(m: &Mat4) -> Mat4 {
        m / m.norm()
    }

    #[test]
    fn calibrated_cameras_give_plane_at_infinity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (cams, _) = calibrated(&mut rng, 5);
        let res = estimate_omega(&cams).unwrap();
        let want = normalized(&Mat4::from_diagonal(&Vec4::new(1.0, 1.0, 1.0, 0.0)));
        assert!((normalized(&res.omega) - want).norm() < 1e-10);
        assert!(res.residual <= 1e-10);
        assert!((res.omega - res.omega.transpose()).norm() <= 1e-12);
    }

    #[test]
    fn distorted_cameras_recover_dual_quadric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (cams, _) = calibrated(&mut rng, 6);
        let g = random_h(&mut rng);
        let h = ProjectiveTransform::new(g.try_inverse().unwrap()).unwrap();
        let distorted: Vec<CameraMatrix> = cams
            .iter()
            .map(|c| apply_projective(&h, c, &[]).unwrap().0)
            .collect();
        let res = estimate_omega(&distorted).unwrap();
        // cameras P G^{-1} give Omega ~ G diag(1,1,1,0) G^T
        let g13 = g.fixed_columns::<3>(0).into_owned();
        let want = normalized(&(g13 * g13.transpose()));
        assert!((normalized(&res.omega) - want).norm() < 1e-8);
    }

    #[test]
    fn invariant_to_camera_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (cams, _) = calibrated(&mut rng, 4);
        let h = ProjectiveTransform::new(random_h(&mut rng)).unwrap();
        let d: Vec<CameraMatrix> = cams.iter().map(|c| apply_projective(&h, c, &[]).unwrap().0).collect();
        let scaled: Vec<CameraMatrix> = d
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let s = if i % 2 == 0 { -3.0 } else { 0.1 * (i as f64 + 1.0) };
                CameraMatrix::new(c.a * s, c.t * s)
            })
            .collect();
        let a = estimate_omega(&d).unwrap().omega;
        let b = estimate_omega(&scaled).unwrap().omega;
        assert!((normalized(&a) - normalized(&b)).norm() < 1e-10);
    }

    #[test]
    fn too_few_cameras() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (cams, _) = calibrated(&mut rng, 2);
        assert!(matches!(estimate_omega(&cams), Err(Error::InsufficientCameras(2))));
    }

    #[test]
    fn noisy_cameras_report_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (cams, _) = calibrated(&mut rng, 5);
        let noisy: Vec<CameraMatrix> = cams
            .iter()
            .map(|c| CameraMatrix::new(c.a + Mat3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal) * 0.01), c.t))
            .collect();
        assert!(estimate_omega(&noisy).unwrap().residual > 1e-6);
    }

    #[test]
    fn identity_omega_extracts_orthogonal_block() {
        let omega = Mat4::from_diagonal(&Vec4::new(1.0, 1.0, 1.0, 0.0));
        let ex = extract_h(&omega).unwrap();
        assert!(ex.realizable);
        let h = ex.h.matrix();
        let h13 = h.fixed_columns::<3>(0).into_owned();
        assert!((h13 * h13.transpose() - omega).norm() < 1e-12);
        assert!((h.determinant() - 1.0).abs() < 1e-12);
        // the completion column is the plane at infinity
        assert!(h.fixed_view::<3, 1>(0, 3).norm() < 1e-12);
    }

    #[test]
    fn indefinite_omega_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = random_h(&mut rng).qr().q();
        let omega = omega_from_eigen(&Vec4::new(2.0, 1.0, -0.5, 0.0), &q);
        let ex = extract_h(&omega).unwrap();
        assert!(!ex.realizable);
        assert!(ex.eigenvalues[3] < 0.0);
    }

    #[test]
    fn rank_deficient_or_negative_omega_fails() {
        let omega = Mat4::from_diagonal(&Vec4::new(1.0, 1.0, 0.0, 0.0));
        assert!(matches!(extract_h(&omega), Err(Error::NotUpgradable(_))));
        let omega = -Mat4::identity();
        assert!(matches!(extract_h(&omega), Err(Error::NotUpgradable(_))));
        let mut omega = Mat4::identity();
        omega[(0, 1)] = 1.0;
        assert!(matches!(extract_h(&omega), Err(Error::NotUpgradable(_))));
    }

    #[test]
    fn identity_upgrade_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (cams, pts) = calibrated(&mut rng, 3);
        let (c2, p2, defect) = apply_upgrade(&cams, &pts, &ProjectiveTransform::identity()).unwrap();
        assert_eq!(c2, cams);
        assert_eq!(p2, pts);
        assert!(defect < 1e-12);
    }

    #[test]
    fn pipeline_restores_metric_cameras() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(10 + seed);
            let (cams, pts) = calibrated(&mut rng, 6);
            let h = ProjectiveTransform::new(random_h(&mut rng)).unwrap();
            let mut d = Vec::new();
            let mut dp = pts.clone();
            for (i, c) in cams.iter().enumerate() {
                let (c2, p2) = apply_projective(&h, c, if i == 0 { &pts } else { &[] }).unwrap();
                if i == 0 {
                    dp = p2;
                }
                d.push(c2);
            }
            // F is projectively invariant, so only the camera blocks show the distortion
            let before: f64 = d.iter().map(|c| orthogonality_defect(&c.a)).sum::<f64>() / d.len() as f64;
            assert!(before > 1e-3);
            let res = estimate_omega(&d).unwrap();
            let ex = extract_h(&res.omega).unwrap();
            assert!(ex.realizable);
            let (up, up_pts, defect) = apply_upgrade(&d, &dp, &ex.h).unwrap();
            assert!(mean_essentiality(&up) <= 1e-8, "{}", mean_essentiality(&up));
            assert!(defect <= 1e-8, "defect {defect} residual {} eig {}", res.residual, ex.eigenvalues);
            // image vectors are preserved up to scale
            for (c_old, c_new) in d.iter().zip(&up) {
                for (u_old, u_new) in dp.iter().zip(&up_pts) {
                    let a = c_old.project(u_old);
                    let b = c_new.project(u_new);
                    assert!(crate::geometry::parallel_defect(&a, &b) < 1e-8);
                }
            }
        }
    }

    #[test]
    fn orthogonality_defect_ignores_scale() {
        let r = rotation_exp(&Vec3::new(0.1, 0.2, 0.3)).into_inner();
        assert!(orthogonality_defect(&(r * 7.0)) < 1e-12);
        assert!(orthogonality_defect(&Mat3::from_diagonal(&Vec3::new(1.0, 1.0, 2.0))) > 0.1);
    }
}
