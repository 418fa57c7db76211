//! Synthetic calibrated scenes with pairwise rotation priors.
//!
//! Image coordinates are normalized (calibration already applied), so a noise
//! level of `1e-3` is roughly one pixel at a focal length of 1000.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{rotation_exp, CameraMatrix, Mat3, Point3, RotationMatrix, Vec2, Vec3};
use crate::objective::{ObjectiveConfig, Observation, Problem, RotationPrior};
use crate::prior::{make_prior, refine_two_view, synthetic_prior, TwoViewPose, TwoViewProblem, WeightOptions};

#[derive(Debug, Clone, PartialEq)]
pub enum Layout {
    /// Evenly spaced on a horizontal circle.
    Ring,
    /// Random on the spherical cap of the given half-angle (radians) around `+z`.
    SphereCap { half_angle: f64 },
    /// Explicit camera centers.
    Centers(Vec<Vec3>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PriorMode {
    /// Refine each pair from perturbed ground truth and build the weight from
    /// the two-view Jacobians.
    TwoViewRefined,
    /// Perturb the true relative rotation and use a scaled identity tangent weight.
    Synthetic { angle_noise: f64, w_scale: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorGraph {
    AllPairs,
    /// Pairs sharing at least this many points.
    Covisibility(usize),
}

pub const DEFAULT_COVISIBILITY: usize = 20;

/// Minimum shared points for a two-view refinement.
const MIN_TWO_VIEW: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub n_cams: usize,
    pub n_pts: usize,
    pub layout: Layout,
    /// Distance of the camera centers from the origin.
    pub radius: f64,
    /// Points are uniform in a ball of this radius around the origin.
    pub point_radius: f64,
    /// Fraction of the points each camera sees.
    pub visibility: f64,
    pub pixel_noise_std: f64,
    pub prior_mode: PriorMode,
    pub prior_graph: PriorGraph,
    pub weight: WeightOptions,
    pub objective: ObjectiveConfig,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_cams: 10,
            n_pts: 100,
            layout: Layout::Ring,
            radius: 5.0,
            point_radius: 1.0,
            visibility: 1.0,
            pixel_noise_std: 0.0,
            prior_mode: PriorMode::TwoViewRefined,
            prior_graph: PriorGraph::Covisibility(DEFAULT_COVISIBILITY),
            weight: WeightOptions::default(),
            objective: ObjectiveConfig::default(),
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_cams < 2 {
            return Err(Error::InvalidConfig("need at least 2 cameras".into()));
        }
        if self.n_pts < 8 {
            return Err(Error::InvalidConfig("need at least 8 points".into()));
        }
        if !(self.visibility > 0.0 && self.visibility <= 1.0) {
            return Err(Error::InvalidConfig("visibility must be in (0, 1]".into()));
        }
        if !(self.radius > self.point_radius && self.point_radius > 0.0) {
            return Err(Error::InvalidConfig(
                "cameras must lie outside the point region".into(),
            ));
        }
        if !(self.pixel_noise_std >= 0.0) {
            return Err(Error::InvalidConfig("noise must be non-negative".into()));
        }
        if let Layout::Centers(c) = &self.layout {
            if c.len() != self.n_cams {
                return Err(Error::InvalidConfig(format!(
                    "{} centers for {} cameras",
                    c.len(),
                    self.n_cams
                )));
            }
        }
        self.objective.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub cameras: Vec<CameraMatrix>,
    pub points: Vec<Point3>,
    /// True `R_k R_l^T` for every non-self prior, in prior order.
    pub relative: Vec<(usize, usize, RotationMatrix)>,
}

/// Rotation whose optical axis (third row) points from `center` to the origin.
pub fn look_at_origin(center: &Vec3) -> Mat3 {
    let f = -center.normalize();
    let up = if f.z.abs() < 0.9 { Vec3::z() } else { Vec3::y() };
    let r1 = f.cross(&up).normalize();
    let r2 = f.cross(&r1);
    Mat3::from_rows(&[r1.transpose(), r2.transpose(), f.transpose()])
}

fn centers_collinear(centers: &[Vec3]) -> bool {
    if centers.len() < 3 {
        return false;
    }
    let mean = centers.iter().sum::<Vec3>() / centers.len() as f64;
    let mut m = Mat3::zeros();
    for c in centers {
        let d = c - mean;
        m += d * d.transpose();
    }
    let ev = m.symmetric_eigenvalues();
    let mut s: Vec<f64> = ev.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s[1] <= 1e-12 * s[0].max(f64::MIN_POSITIVE)
}

fn camera_centers(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    match &cfg.layout {
        Layout::Ring => (0..cfg.n_cams)
            .map(|i| {
                let th = 2.0 * std::f64::consts::PI * i as f64 / cfg.n_cams as f64;
                Vec3::new(th.cos(), th.sin(), 0.0) * cfg.radius
            })
            .collect(),
        Layout::SphereCap { half_angle } => (0..cfg.n_cams)
            .map(|_| {
                let cos_lo = half_angle.cos();
                let z = cos_lo + (1.0 - cos_lo) * rng.random::<f64>();
                let phi = 2.0 * std::f64::consts::PI * rng.random::<f64>();
                let s = (1.0 - z * z).max(0.0).sqrt();
                Vec3::new(s * phi.cos(), s * phi.sin(), z) * cfg.radius
            })
            .collect(),
        Layout::Centers(c) => c.clone(),
    }
}

fn random_in_ball(rng: &mut ChaCha8Rng, radius: f64) -> Vec3 {
    let dir = Vec3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    let dir = dir / dir.norm().max(f64::MIN_POSITIVE);
    dir * radius * rng.random::<f64>().cbrt()
}

/// Per-camera sets of visible points, every point in at least two.
fn draw_visibility(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<BTreeSet<usize>> {
    let per_cam = ((cfg.visibility * cfg.n_pts as f64).round() as usize).clamp(1, cfg.n_pts);
    let mut vis: Vec<BTreeSet<usize>> = (0..cfg.n_cams)
        .map(|_| sample(rng, cfg.n_pts, per_cam).into_iter().collect())
        .collect();
    for j in 0..cfg.n_pts {
        while vis.iter().filter(|s| s.contains(&j)).count() < 2 {
            let i = rng.random_range(0..cfg.n_cams);
            vis[i].insert(j);
        }
    }
    vis
}

fn prior_pairs(cfg: &SceneConfig, vis: &[BTreeSet<usize>]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for k in 0..cfg.n_cams {
        for l in k + 1..cfg.n_cams {
            let shared = vis[k].intersection(&vis[l]).count();
            let keep = match cfg.prior_graph {
                PriorGraph::AllPairs => match cfg.prior_mode {
                    PriorMode::TwoViewRefined => shared >= MIN_TWO_VIEW,
                    PriorMode::Synthetic { .. } => true,
                },
                PriorGraph::Covisibility(tau) => shared >= tau.max(MIN_TWO_VIEW),
            };
            if keep {
                pairs.push((k, l));
            }
        }
    }
    pairs
}

fn connected(n: usize, pairs: &[(usize, usize)]) -> bool {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        p[x] = r;
        r
    }
    for &(a, b) in pairs {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        parent[ra] = rb;
    }
    let root = find(&mut parent, 0);
    (0..n).all(|i| find(&mut parent, i) == root)
}

/// Two-view problem for pair `(k, l)` with `l` as the reference view,
/// started from a perturbed copy of the true relative pose.
fn two_view_from_truth(
    cams: &[CameraMatrix],
    points: &[Point3],
    shared: &[usize],
    meas: &dyn Fn(usize, usize) -> Vec2,
    k: usize,
    l: usize,
    rng: &mut ChaCha8Rng,
) -> TwoViewProblem {
    let (pk, pl) = (&cams[k], &cams[l]);
    let r_rel = pk.a * pl.a.transpose();
    let t_rel = pk.t - r_rel * pl.t;
    let s = t_rel.norm();
    let mut g = |sd: f64| Vec3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal) * sd);
    let rot = RotationMatrix::new_unchecked(rotation_exp(&g(0.01)).into_inner() * r_rel);
    let t = (t_rel / s + g(0.01)).normalize();
    let pts = shared
        .iter()
        .map(|&j| {
            let u = (pl.a * points[j] + pl.t) / s;
            u + g(0.01) * u.norm()
        })
        .collect();
    TwoViewProblem {
        correspondences: shared.iter().map(|&j| (meas(l, j), meas(k, j))).collect(),
        initial: TwoViewPose { rot, t, points: pts },
    }
}

/// Builds a scene, its measurements and its priors. Deterministic in `cfg.seed`.
pub fn generate(cfg: &SceneConfig) -> Result<(Problem, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers = camera_centers(cfg, &mut rng);
    if centers_collinear(&centers) {
        return Err(Error::DegenerateScene("camera centers are collinear".into()));
    }
    let cameras: Vec<CameraMatrix> = centers
        .iter()
        .map(|c| {
            let r = look_at_origin(c);
            CameraMatrix::new(r, -(r * c))
        })
        .collect();
    let points: Vec<Point3> = (0..cfg.n_pts).map(|_| random_in_ball(&mut rng, cfg.point_radius)).collect();

    let mut attempt = 0;
    let (vis, pairs) = loop {
        let vis = draw_visibility(cfg, &mut rng);
        let pairs = prior_pairs(cfg, &vis);
        if cfg.visibility < 0.5 || connected(cfg.n_cams, &pairs) {
            break (vis, pairs);
        }
        attempt += 1;
        if attempt >= 20 {
            return Err(Error::DegenerateScene("prior graph is not connected".into()));
        }
    };

    // measurements indexed by (camera, point)
    let mut meas = std::collections::HashMap::new();
    let mut observations = Vec::new();
    for j in 0..cfg.n_pts {
        for (i, cam) in cameras.iter().enumerate() {
            if !vis[i].contains(&j) {
                continue;
            }
            let x = cam.project(&points[j]);
            if x.z <= 0.0 {
                return Err(Error::DegenerateScene(format!("point {j} is behind camera {i}")));
            }
            let noise = Vec2::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal) * cfg.pixel_noise_std);
            let m = Vec2::new(x.x / x.z, x.y / x.z) + noise;
            meas.insert((i, j), m);
            observations.push(Observation { cam: i, pt: j, m });
        }
    }
    let lookup = |i: usize, j: usize| meas[&(i, j)];

    let mut priors = Vec::new();
    let mut relative = Vec::new();
    for &(k, l) in &pairs {
        let r_rel = RotationMatrix::new_unchecked(cameras[k].a * cameras[l].a.transpose());
        let prior = match cfg.prior_mode {
            PriorMode::Synthetic { angle_noise, w_scale } => {
                synthetic_prior(k, l, &r_rel, angle_noise, w_scale, &cfg.weight, &mut rng)
            }
            PriorMode::TwoViewRefined => {
                let shared: Vec<usize> = vis[k].intersection(&vis[l]).copied().collect();
                let tv = two_view_from_truth(&cameras, &points, &shared, &lookup, k, l, &mut rng);
                match refine_two_view(&tv).and_then(|lm| make_prior(k, l, &lm, &cfg.weight)) {
                    Ok(p) => p,
                    Err(e) => {
                        log::warn!("skipping prior ({k}, {l}): {e}");
                        continue;
                    }
                }
            }
        };
        priors.push(prior);
        relative.push((k, l, r_rel));
    }
    priors.extend((0..cfg.n_cams).map(RotationPrior::self_pair));

    let prob = Problem {
        n_cams: cfg.n_cams,
        n_pts: cfg.n_pts,
        observations,
        priors,
        config: cfg.objective,
    };
    prob.validate()?;
    Ok((
        prob,
        GroundTruth {
            cameras,
            points,
            relative,
        },
    ))
}
