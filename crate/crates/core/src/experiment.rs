//! Multi-start basin experiments and near-metric evaluation.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{align_similarity, essentiality_measure, fundamental_matrix, nearest_rotation, RotationMatrix};
use crate::objective::{objective_value, ObjectiveConfig, Parametrization, Problem, Variables};
use crate::solver::{init_random, solve, solve_joint_lm, SolveReport, SolveStatus, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    /// pOSE only, variable projection.
    Pose,
    /// pOSE with rotation priors, variable projection.
    RotPose,
    /// pOSE with the orthogonality penalty, joint LM on free camera blocks.
    DiagPose,
    /// pOSE with rotation priors, joint LM on exponential-map rotations.
    RotPoseDirect,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::RotPose, Method::Pose, Method::DiagPose, Method::RotPoseDirect];

    pub fn label(&self) -> &'static str {
        match self {
            Method::Pose => "pose",
            Method::RotPose => "rot+pose",
            Method::DiagPose => "diag+pose",
            Method::RotPoseDirect => "rot+pose-direct",
        }
    }

    /// The problem with this method's term toggles.
    pub fn configure(&self, prob: &Problem) -> Problem {
        let (include_rot, include_diag, parametrization) = match self {
            Method::Pose => (false, false, Parametrization::FreeMatrix),
            Method::RotPose => (true, false, Parametrization::FreeMatrix),
            Method::DiagPose => (false, true, Parametrization::FreeMatrix),
            Method::RotPoseDirect => (true, false, Parametrization::ExponentialMap),
        };
        prob.with_config(ObjectiveConfig {
            include_rot,
            include_diag,
            parametrization,
            ..prob.config
        })
    }

    /// Solves the configured problem from the standard-normal start of `seed`.
    pub fn run(&self, prob: &Problem, cfg: &SolverConfig, seed: u64) -> Result<SolveReport> {
        let p = self.configure(prob);
        let init = init_random(&p, seed);
        match self {
            Method::Pose | Method::RotPose => solve(&p, cfg, &init),
            Method::DiagPose => solve_joint_lm(&p, cfg, &init, Parametrization::FreeMatrix),
            Method::RotPoseDirect => solve_joint_lm(&p, cfg, &init, Parametrization::ExponentialMap),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .find(|m| m.label() == s)
            .copied()
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tolerance {
    /// `|f - f_min| <= tol (1 + |f_min|)`.
    Relative(f64),
    /// `|f - f_min| <= tol`.
    Absolute(f64),
}

impl Tolerance {
    pub fn reached(&self, f: f64, f_min: f64) -> bool {
        match *self {
            Tolerance::Relative(tol) => (f - f_min).abs() <= tol * (1.0 + f_min.abs()),
            Tolerance::Absolute(tol) => (f - f_min).abs() <= tol,
        }
    }
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance::Relative(1e-5)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasinRun {
    pub method: Method,
    pub seed: u64,
    /// NaN when the run failed.
    pub final_objective: f64,
    pub iters: usize,
    pub accepted_steps: usize,
    /// `converged`, `max_iters`, `stalled` or `error`.
    pub status: String,
    pub success: bool,
    /// Accepted steps until the trace first reached the minimum (successful runs only).
    pub iters_to_min: Option<usize>,
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasinResult {
    pub method: Method,
    /// Sorted by seed.
    pub runs: Vec<BasinRun>,
    pub f_min: f64,
    pub success_rate: f64,
}

impl BasinResult {
    pub fn sorted_objectives(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.runs.iter().map(|r| r.final_objective).collect();
        v.sort_by(f64::total_cmp);
        v
    }

    /// Mean of `iters_to_min` over successful runs.
    pub fn mean_iters_to_min(&self) -> Option<f64> {
        let its: Vec<usize> = self.runs.iter().filter_map(|r| r.iters_to_min).collect();
        (!its.is_empty()).then(|| its.iter().sum::<usize>() as f64 / its.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasinConfig {
    pub methods: Vec<Method>,
    pub runs: usize,
    pub base_seed: u64,
    pub tolerance: Tolerance,
    pub solver: SolverConfig,
    /// Concurrent solves; `None` uses the available parallelism.
    pub workers: Option<usize>,
}

impl Default for BasinConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            runs: 100,
            base_seed: 0,
            tolerance: Tolerance::default(),
            solver: SolverConfig::default(),
            workers: None,
        }
    }
}

fn one_run(prob: &Problem, cfg: &SolverConfig, method: Method, seed: u64) -> BasinRun {
    match method.run(prob, cfg, seed) {
        Ok(rep) => BasinRun {
            method,
            seed,
            final_objective: rep.final_objective(),
            iters: rep.iters_used,
            accepted_steps: rep.accepted_steps,
            status: rep.status.to_string(),
            success: false,
            iters_to_min: None,
            trace: rep.objective_trace,
        },
        Err(e) => {
            log::warn!("{method} seed {seed}: {e}");
            BasinRun {
                method,
                seed,
                final_objective: f64::NAN,
                iters: 0,
                accepted_steps: 0,
                status: "error".into(),
                success: false,
                iters_to_min: None,
                trace: Vec::new(),
            }
        }
    }
}

/// Success marks against the per-method minimum over all finite runs.
pub fn score(method: Method, mut runs: Vec<BasinRun>, tol: Tolerance) -> BasinResult {
    runs.sort_by_key(|r| r.seed);
    let f_min = runs
        .iter()
        .map(|r| r.final_objective)
        .filter(|f| f.is_finite())
        .fold(f64::INFINITY, f64::min);
    for r in &mut runs {
        r.success = r.final_objective.is_finite() && tol.reached(r.final_objective, f_min);
        r.iters_to_min = if r.success {
            r.trace.iter().position(|&f| tol.reached(f, f_min))
        } else {
            None
        };
    }
    let success_rate = if runs.is_empty() {
        0.0
    } else {
        runs.iter().filter(|r| r.success).count() as f64 / runs.len() as f64
    };
    BasinResult {
        method,
        runs,
        f_min,
        success_rate,
    }
}

/// Runs every method from seeds `base_seed .. base_seed + runs`.
pub fn run_basin(prob: &Problem, cfg: &BasinConfig) -> Result<Vec<BasinResult>> {
    cfg.solver.validate()?;
    if cfg.runs == 0 {
        return Err(Error::InvalidConfig("runs must be positive".into()));
    }
    let workers = cfg
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
        .max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let jobs: Vec<(Method, u64)> = cfg
        .methods
        .iter()
        .flat_map(|&m| (0..cfg.runs as u64).map(move |k| (m, cfg.base_seed + k)))
        .collect();
    let runs: Vec<BasinRun> = pool.install(|| {
        jobs.par_iter()
            .map(|&(m, seed)| one_run(prob, &cfg.solver, m, seed))
            .collect()
    });
    Ok(cfg
        .methods
        .iter()
        .map(|&m| {
            let mine = runs.iter().filter(|r| r.method == m).cloned().collect();
            score(m, mine, cfg.tolerance)
        })
        .collect())
}

pub const BASIN_HEADER: [&str; 8] = [
    "method",
    "seed",
    "final_objective",
    "iters",
    "status",
    "accepted_steps",
    "iters_to_min",
    "success",
];

/// One row per run, ordered by method then seed.
pub fn write_basin_csv<W: std::io::Write>(results: &[BasinResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(BASIN_HEADER)?;
    let mut sorted: Vec<&BasinResult> = results.iter().collect();
    sorted.sort_by_key(|r| r.method);
    for res in sorted {
        for r in &res.runs {
            w.write_record([
                r.method.label().to_string(),
                r.seed.to_string(),
                format!("{:e}", r.final_objective),
                r.iters.to_string(),
                r.status.clone(),
                r.accepted_steps.to_string(),
                r.iters_to_min.map(|k| k.to_string()).unwrap_or_default(),
                (r.success as u8).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Counts per bin for upper edges `edges` (ascending); values above the last
/// edge go to a final overflow bin, so the result has `edges.len() + 1` entries.
pub fn histogram(values: &[f64], edges: &[f64]) -> Vec<usize> {
    let mut counts = vec![0; edges.len() + 1];
    for v in values {
        let k = edges.iter().position(|e| v <= e).unwrap_or(edges.len());
        counts[k] += 1;
    }
    counts
}

/// Camera pairs entering the essentiality statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairSelection {
    /// Pairs with a (non-self) rotation prior.
    Priors,
    /// Prior pairs plus every pair sharing a point.
    AllCovisible,
}

pub fn eval_pairs(prob: &Problem, sel: PairSelection) -> Vec<(usize, usize)> {
    let mut pairs: BTreeSet<(usize, usize)> = prob
        .priors
        .iter()
        .filter(|p| !p.is_self())
        .map(|p| (p.k.min(p.l), p.k.max(p.l)))
        .collect();
    if sel == PairSelection::AllCovisible {
        for obs in prob.observations_by_point() {
            let cams: BTreeSet<usize> = obs.iter().map(|&o| prob.observations[o].cam).collect();
            let cams: Vec<usize> = cams.into_iter().collect();
            for (a, &k) in cams.iter().enumerate() {
                for &l in &cams[a + 1..] {
                    pairs.insert((k, l));
                }
            }
        }
    }
    pairs.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub l_pose: f64,
    pub ess_mean: f64,
    pub ess_min: f64,
    pub ess_max: f64,
    pub n_pairs: usize,
    /// Pairs without a valid fundamental matrix.
    pub skipped_pairs: usize,
    /// Point RMSE after similarity alignment to ground truth.
    pub point_rmse: Option<f64>,
    /// Mean camera rotation error in degrees after the same alignment.
    pub rot_err_deg: Option<f64>,
}

pub const METRIC_HEADER: [&str; 8] = [
    "l_pose",
    "ess_mean",
    "ess_min",
    "ess_max",
    "n_pairs",
    "skipped_pairs",
    "point_rmse",
    "rot_err_deg",
];

impl MetricReport {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(METRIC_HEADER)?;
        let opt = |x: Option<f64>| x.map(|v| format!("{v:e}")).unwrap_or_default();
        w.write_record([
            format!("{:e}", self.l_pose),
            format!("{:e}", self.ess_mean),
            format!("{:e}", self.ess_min),
            format!("{:e}", self.ess_max),
            self.n_pairs.to_string(),
            self.skipped_pairs.to_string(),
            opt(self.point_rmse),
            opt(self.rot_err_deg),
        ])?;
        w.flush()?;
        Ok(())
    }
}

/// Essentiality statistics over the given pairs: `(mean, min, max, used, skipped)`.
pub fn essentiality_stats(vars: &Variables, pairs: &[(usize, usize)]) -> (f64, f64, f64, usize, usize) {
    let cams = vars.cameras();
    let mut vals = Vec::new();
    let mut skipped = 0;
    for &(k, l) in pairs {
        match fundamental_matrix(&cams[k], &cams[l]).and_then(|f| essentiality_measure(&f)) {
            Ok(e) => vals.push(e),
            Err(_) => skipped += 1,
        }
    }
    if vals.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN, 0, skipped);
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, min, max, vals.len(), skipped)
}

/// Near-metric measures of a solution; `gt` adds alignment errors.
pub fn evaluate(
    prob: &Problem,
    vars: &Variables,
    gt: Option<&Variables>,
    sel: PairSelection,
) -> Result<MetricReport> {
    let l_pose = objective_value(prob, vars)?.l_pose;
    let pairs = eval_pairs(prob, sel);
    let (ess_mean, ess_min, ess_max, n_pairs, skipped_pairs) = essentiality_stats(vars, &pairs);
    let (point_rmse, rot_err_deg) = match gt {
        None => (None, None),
        Some(gt) => {
            gt.check_dims(prob)?;
            let (rmse, rot) = alignment_errors(vars, gt)?;
            (Some(rmse), Some(rot))
        }
    };
    Ok(MetricReport {
        l_pose,
        ess_mean,
        ess_min,
        ess_max,
        n_pairs,
        skipped_pairs,
        point_rmse,
        rot_err_deg,
    })
}

/// Point RMSE and mean rotation error (degrees) after aligning the solution's
/// points to the ground truth by a similarity.
///
/// The rotation terms cannot tell a reconstruction from its mirror image
/// (`b_i S`, `S u` for a reflection `S`), so a solution whose camera blocks
/// mostly have negative determinant is mirrored first.
pub fn alignment_errors(vars: &Variables, gt: &Variables) -> Result<(f64, f64)> {
    let vars = unmirrored(vars);
    let sim = align_similarity(&vars.c, &gt.c)?;
    let n = vars.c.len().max(1) as f64;
    let rmse = (vars
        .c
        .iter()
        .zip(&gt.c)
        .map(|(u, g)| (sim.apply(u) - g).norm_squared())
        .sum::<f64>()
        / n)
        .sqrt();
    // camera blocks in the ground-truth frame are a Q^T up to scale and sign
    let q = sim.rot.matrix();
    let mut err = 0.0;
    for (a, g) in vars.b.iter().zip(&gt.b) {
        let mut m = a * q.transpose();
        if m.determinant() < 0.0 {
            m = -m;
        }
        let r = nearest_rotation(&m);
        err += r.angle_to(&RotationMatrix::new_unchecked(*g));
    }
    Ok((rmse, (err / vars.b.len().max(1) as f64).to_degrees()))
}

/// Mirrors through `z = 0` when most camera blocks have negative determinant.
pub fn unmirrored(vars: &Variables) -> Variables {
    let negative = vars.b.iter().filter(|a| a.determinant() < 0.0).count();
    if 2 * negative <= vars.b.len() {
        return vars.clone();
    }
    let s = crate::geometry::Mat3::from_diagonal(&crate::geometry::Vec3::new(1.0, 1.0, -1.0));
    Variables {
        b: vars.b.iter().map(|a| a * s).collect(),
        t: vars.t.clone(),
        c: vars.c.iter().map(|u| s * u).collect(),
    }
}

/// Convenience status check for CLI exit codes.
pub fn is_converged(rep: &SolveReport) -> bool {
    rep.status == SolveStatus::Converged
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate, SceneConfig};

    fn small_scene() -> (Problem, Variables) {
        let (prob, gt) = generate(&SceneConfig {
            n_cams: 5,
            n_pts: 30,
            pixel_noise_std: 1e-3,
            seed: 4,
            ..Default::default()
        })
        .unwrap();
        (prob, Variables::from_cameras(&gt.cameras, gt.points))
    }

    #[test]
    fn method_labels_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.label().parse::<Method>().unwrap(), m);
        }
        assert!("rot".parse::<Method>().is_err());
    }

    #[test]
    fn method_toggles() {
        let (prob, _) = small_scene();
        let d = Method::DiagPose.configure(&prob);
        assert!(d.config.include_diag && !d.config.include_rot);
        assert_eq!(d.active_priors().len(), 5);
        let p = Method::Pose.configure(&prob);
        assert!(p.active_priors().is_empty());
        let r = Method::RotPose.configure(&prob);
        assert_eq!(r.active_priors().len(), prob.priors.len());
    }

    #[test]
    fn single_run_has_full_success_rate() {
        let (prob, _) = small_scene();
        let cfg = BasinConfig {
            methods: vec![Method::RotPose],
            runs: 1,
            ..Default::default()
        };
        let res = run_basin(&prob, &cfg).unwrap();
        assert_eq!(res[0].success_rate, 1.0);
        assert_eq!(res[0].runs[0].iters_to_min.is_some(), true);
    }

    #[test]
    fn basin_is_deterministic_across_worker_counts() {
        let (prob, _) = small_scene();
        let mk = |workers| BasinConfig {
            methods: vec![Method::Pose, Method::DiagPose],
            runs: 4,
            workers: Some(workers),
            ..Default::default()
        };
        let a = run_basin(&prob, &mk(1)).unwrap();
        let b = run_basin(&prob, &mk(3)).unwrap();
        assert_eq!(a, b);
        let mut ca = Vec::new();
        let mut cb = Vec::new();
        write_basin_csv(&a, &mut ca).unwrap();
        write_basin_csv(&b, &mut cb).unwrap();
        assert_eq!(ca, cb);
        let text = String::from_utf8(ca).unwrap();
        assert_eq!(text.lines().count(), 1 + 8);
        assert!(text.starts_with("method,seed,final_objective,iters,status"));
    }

    #[test]
    fn success_rule() {
        let tol = Tolerance::Relative(1e-5);
        assert!(tol.reached(1.0 + 1e-5, 1.0));
        assert!(!tol.reached(1.0 + 3e-5, 1.0));
        assert!(Tolerance::Absolute(1e-5).reached(1e-5, 0.0));
        let mk = |seed, f| BasinRun {
            method: Method::Pose,
            seed,
            final_objective: f,
            iters: 1,
            accepted_steps: 1,
            status: "converged".into(),
            success: false,
            iters_to_min: None,
            trace: vec![10.0, f],
        };
        let res = score(Method::Pose, vec![mk(1, 2.0), mk(0, 1.0), mk(2, f64::NAN)], tol);
        assert_eq!(res.f_min, 1.0);
        assert!((res.success_rate - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(res.runs[0].seed, 0);
        assert_eq!(res.runs[0].iters_to_min, Some(1));
        assert_eq!(res.sorted_objectives()[0], 1.0);
    }

    #[test]
    fn histogram_overflow_bin() {
        let h = histogram(&[0.5, 1.0, 1.5, 10.0, 1e9], &[1.0, 2.0]);
        assert_eq!(h, vec![2, 1, 2]);
    }

    #[test]
    fn ground_truth_is_metric() {
        let (prob, gt) = small_scene();
        let rep = evaluate(&prob, &gt, Some(&gt), PairSelection::Priors).unwrap();
        assert!(rep.ess_mean <= 1e-8 && rep.ess_max <= 1e-8);
        assert!(rep.ess_min <= rep.ess_mean && rep.ess_mean <= rep.ess_max);
        assert!(rep.point_rmse.unwrap() < 1e-9);
        assert!(rep.rot_err_deg.unwrap() < 1e-6);
        assert_eq!(rep.n_pairs, 10);
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("l_pose,ess_mean,ess_min,ess_max,n_pairs,skipped_pairs,point_rmse,rot_err_deg\n"));
    }

    #[test]
    fn alignment_undoes_similarity() {
        let (_, gt) = small_scene();
        let rot = crate::geometry::rotation_exp(&crate::geometry::Vec3::new(0.3, -0.1, 0.8)).into_inner();
        let moved = gt.rigid_transformed(&rot, &crate::geometry::Vec3::new(1.0, 2.0, 3.0));
        let (rmse, rot_err) = alignment_errors(&moved, &gt).unwrap();
        assert!(rmse < 1e-9 && rot_err < 1e-6);
    }

    #[test]
    fn alignment_undoes_reflection() {
        let (_, gt) = small_scene();
        let s = crate::geometry::Mat3::from_diagonal(&crate::geometry::Vec3::new(-1.0, 1.0, 1.0));
        let mirrored = Variables {
            b: gt.b.iter().map(|a| a * s).collect(),
            t: gt.t.clone(),
            c: gt.c.iter().map(|u| s * u).collect(),
        };
        let (rmse, rot_err) = alignment_errors(&mirrored, &gt).unwrap();
        assert!(rmse < 1e-9 && rot_err < 1e-6, "{rmse} {rot_err}");
    }

    #[test]
    fn all_covisible_pairs_superset() {
        let (prob, _) = small_scene();
        let a = eval_pairs(&prob, PairSelection::Priors);
        let b = eval_pairs(&prob, PairSelection::AllCovisible);
        assert!(a.iter().all(|p| b.contains(p)));
    }
}
