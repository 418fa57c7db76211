use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use rotpose::experiment::{
    essentiality_stats, eval_pairs, evaluate, histogram, run_basin, write_basin_csv, BasinConfig, Method,
    PairSelection, Tolerance,
};
use rotpose::io::{export_ply, load_problem, load_solution, save_problem, save_solution};
use rotpose::objective::{Problem, Variables};
use rotpose::scene::{generate, Layout, PriorGraph, PriorMode, SceneConfig, DEFAULT_COVISIBILITY};
use rotpose::solver::{SolveStatus, SolverConfig};
use rotpose::upgrade::{apply_upgrade, estimate_omega, extract_h};

const EXIT_NOT_CONVERGED: u8 = 3;
const EXIT_NOT_UPGRADABLE: u8 = 4;

#[derive(Parser)]
#[command(name = "rotpose", version, about = "Initialization-free structure from motion with rotation priors")]
struct Cli {
    /// Log progress to stderr.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic problem.
    Generate(GenerateArgs),
    /// Solve a problem from a seeded random start.
    Solve(SolveArgs),
    /// Multi-start convergence experiment.
    Basin(BasinArgs),
    /// Near-metric measures of a solution.
    Eval(EvalArgs),
    /// Metric upgrade of a solution.
    Upgrade(UpgradeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum LayoutArg {
    Ring,
    SphereCap,
}

#[derive(Clone, Copy, ValueEnum)]
enum PriorArg {
    TwoView,
    Synthetic,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    cams: usize,
    #[arg(long)]
    pts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short = 'o')]
    output: PathBuf,
    /// Also write the ground truth as a solution file.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "ring")]
    layout: LayoutArg,
    /// Cap half-angle in degrees for the sphere-cap layout.
    #[arg(long, default_value_t = 60.0)]
    cap_angle: f64,
    #[arg(long, default_value_t = 5.0)]
    radius: f64,
    #[arg(long, default_value_t = 1.0)]
    point_radius: f64,
    /// Probability that a camera sees a point.
    #[arg(long, default_value_t = 1.0)]
    visibility: f64,
    /// Gaussian noise on normalized image coordinates.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, value_enum, default_value = "two-view")]
    priors: PriorArg,
    /// Rotation noise in radians for synthetic priors.
    #[arg(long, default_value_t = 0.01)]
    angle_noise: f64,
    /// Weight scale for synthetic priors.
    #[arg(long, default_value_t = 1.0)]
    w_scale: f64,
    /// Build priors for every camera pair instead of the covisibility graph.
    #[arg(long)]
    all_pairs: bool,
    /// Minimum shared points for a prior pair.
    #[arg(long, default_value_t = DEFAULT_COVISIBILITY)]
    covisibility: usize,
    #[arg(long, default_value_t = 0.05)]
    eta: f64,
}

#[derive(Args)]
struct SolverArgs {
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-2)]
    lambda0: f64,
    /// Override the problem's affine weight.
    #[arg(long)]
    eta: Option<f64>,
}

impl SolverArgs {
    fn config(&self, seed: u64) -> SolverConfig {
        SolverConfig {
            max_iters: self.max_iters,
            lambda0: self.lambda0,
            seed,
            ..SolverConfig::default()
        }
    }

    fn apply_eta(&self, prob: Problem) -> rotpose::Result<Problem> {
        match self.eta {
            None => Ok(prob),
            Some(eta) => {
                let p = prob.with_config(rotpose::objective::ObjectiveConfig { eta, ..prob.config });
                p.config.validate()?;
                Ok(p)
            }
        }
    }
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    problem: PathBuf,
    #[arg(long, default_value = "rot+pose")]
    method: Method,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short = 'o')]
    output: PathBuf,
    /// Report file; stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Point cloud with camera centers.
    #[arg(long)]
    ply: Option<PathBuf>,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct BasinArgs {
    #[arg(long)]
    problem: PathBuf,
    #[arg(long, default_value_t = 100)]
    runs: usize,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    /// Absolute instead of relative success tolerance.
    #[arg(long)]
    absolute: bool,
    /// Comma-separated method labels.
    #[arg(long, value_delimiter = ',', default_value = "rot+pose,pose,diag+pose,rot+pose-direct")]
    methods: Vec<Method>,
    #[arg(long, default_value_t = 0)]
    base_seed: u64,
    #[arg(long)]
    workers: Option<usize>,
    /// Per-run CSV; stdout when omitted.
    #[arg(long, short = 'o')]
    output: Option<PathBuf>,
    /// Histogram CSV of final objectives.
    #[arg(long)]
    hist: Option<PathBuf>,
    /// Comma-separated ascending bin upper edges.
    #[arg(long, value_delimiter = ',', default_value = "1e-2,1e-1,1,1e1,1e2,1e3")]
    edges: Vec<f64>,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    problem: PathBuf,
    #[arg(long)]
    solution: PathBuf,
    /// Ground-truth solution for alignment errors.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Include every covisible pair, not only prior pairs.
    #[arg(long)]
    all_pairs: bool,
    /// Report CSV; stdout when omitted.
    #[arg(long, short = 'o')]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct UpgradeArgs {
    #[arg(long)]
    solution: PathBuf,
    /// Problem whose prior pairs enter the essentiality means; all pairs otherwise.
    #[arg(long)]
    problem: Option<PathBuf>,
    #[arg(long, short = 'o')]
    output: Option<PathBuf>,
    /// Report file; stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn output(path: Option<&Path>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn cmd_generate(a: &GenerateArgs) -> rotpose::Result<u8> {
    let cfg = SceneConfig {
        n_cams: a.cams,
        n_pts: a.pts,
        layout: match a.layout {
            LayoutArg::Ring => Layout::Ring,
            LayoutArg::SphereCap => Layout::SphereCap {
                half_angle: a.cap_angle.to_radians(),
            },
        },
        radius: a.radius,
        point_radius: a.point_radius,
        visibility: a.visibility,
        pixel_noise_std: a.noise,
        prior_mode: match a.priors {
            PriorArg::TwoView => PriorMode::TwoViewRefined,
            PriorArg::Synthetic => PriorMode::Synthetic {
                angle_noise: a.angle_noise,
                w_scale: a.w_scale,
            },
        },
        prior_graph: if a.all_pairs {
            PriorGraph::AllPairs
        } else {
            PriorGraph::Covisibility(a.covisibility)
        },
        objective: rotpose::objective::ObjectiveConfig {
            eta: a.eta,
            ..Default::default()
        },
        seed: a.seed,
        ..SceneConfig::default()
    };
    let (prob, gt) = generate(&cfg)?;
    save_problem(&prob, &a.output)?;
    if let Some(path) = &a.gt {
        save_solution(&Variables::from_cameras(&gt.cameras, gt.points.clone()), path)?;
    }
    let n_priors = prob.priors.iter().filter(|p| !p.is_self()).count();
    println!(
        "generated {} cameras, {} points, {} observations, {} rotation priors -> {}",
        prob.n_cams,
        prob.n_pts,
        prob.observations.len(),
        n_priors,
        a.output.display()
    );
    Ok(0)
}

fn cmd_solve(a: &SolveArgs) -> rotpose::Result<u8> {
    let prob = a.solver.apply_eta(load_problem(&a.problem)?)?;
    let cfg = a.solver.config(a.seed);
    cfg.validate()?;
    let rep = a.method.run(&prob, &cfg, a.seed)?;
    save_solution(&rep.vars, &a.output)?;
    if let Some(path) = &a.ply {
        let omitted = export_ply(&rep.vars, path)?;
        if omitted > 0 {
            log::warn!("{omitted} cameras without a finite center left out of the point cloud");
        }
    }
    let b = &rep.term_breakdown;
    let mut w = output(a.report.as_deref())?;
    writeln!(w, "method {}", a.method)?;
    writeln!(w, "eta {:e}", prob.config.eta)?;
    writeln!(w, "seed {}", a.seed)?;
    writeln!(w, "status {}", rep.status)?;
    writeln!(w, "iterations {}", rep.iters_used)?;
    writeln!(w, "accepted_steps {}", rep.accepted_steps)?;
    writeln!(w, "objective {:e}", b.total)?;
    writeln!(w, "ose {:e}", b.ose)?;
    writeln!(w, "aff {:e}", b.aff)?;
    writeln!(w, "l_pose {:e}", b.l_pose)?;
    writeln!(w, "rot {:e}", b.rot)?;
    writeln!(w, "diag {:e}", b.diag)?;
    w.flush()?;
    Ok(if rep.status == SolveStatus::Converged {
        0
    } else {
        EXIT_NOT_CONVERGED
    })
}

fn cmd_basin(a: &BasinArgs) -> rotpose::Result<u8> {
    let prob = a.solver.apply_eta(load_problem(&a.problem)?)?;
    let cfg = BasinConfig {
        methods: a.methods.clone(),
        runs: a.runs,
        base_seed: a.base_seed,
        tolerance: if a.absolute {
            Tolerance::Absolute(a.tol)
        } else {
            Tolerance::Relative(a.tol)
        },
        solver: a.solver.config(0),
        workers: a.workers,
    };
    let results = run_basin(&prob, &cfg)?;
    write_basin_csv(&results, output(a.output.as_deref())?)?;

    if let Some(path) = &a.hist {
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        w.write_record(["method", "upper_edge", "count"])?;
        for r in &results {
            let counts = histogram(&r.sorted_objectives(), &a.edges);
            for (k, c) in counts.iter().enumerate() {
                let edge = a.edges.get(k).map(|e| format!("{e:e}")).unwrap_or_else(|| "overflow".into());
                w.write_record([r.method.label().to_string(), edge, c.to_string()])?;
            }
        }
        w.flush()?;
    }
    for r in &results {
        let its = r
            .mean_iters_to_min()
            .map(|x| format!("{x:.1}"))
            .unwrap_or_else(|| "-".into());
        eprintln!(
            "{:<16} success {:>5.1}%  f_min {:e}  mean steps to min {}",
            r.method.label(),
            100.0 * r.success_rate,
            r.f_min,
            its
        );
    }
    Ok(0)
}

fn cmd_eval(a: &EvalArgs) -> rotpose::Result<u8> {
    let prob = load_problem(&a.problem)?;
    let vars = load_solution(&a.solution)?;
    let gt = a.gt.as_deref().map(load_solution).transpose()?;
    let sel = if a.all_pairs {
        PairSelection::AllCovisible
    } else {
        PairSelection::Priors
    };
    let rep = evaluate(&prob, &vars, gt.as_ref(), sel)?;
    if rep.skipped_pairs > 0 {
        log::warn!("{} pairs skipped for singular cameras", rep.skipped_pairs);
    }
    rep.write_csv(output(a.output.as_deref())?)?;
    Ok(0)
}

fn all_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|k| (k + 1..n).map(move |l| (k, l))).collect()
}

fn cmd_upgrade(a: &UpgradeArgs) -> rotpose::Result<u8> {
    let vars = load_solution(&a.solution)?;
    let pairs = match &a.problem {
        Some(p) => {
            let prob = load_problem(p)?;
            vars.check_dims(&prob)?;
            let pairs = eval_pairs(&prob, PairSelection::Priors);
            if pairs.is_empty() {
                all_pairs(vars.n_cams())
            } else {
                pairs
            }
        }
        None => all_pairs(vars.n_cams()),
    };
    let cams = vars.cameras();
    let est = estimate_omega(&cams)?;
    let ext = extract_h(&est.omega)?;
    let (new_cams, new_pts, defect) = apply_upgrade(&cams, &vars.c, &ext.h)?;
    let upgraded = Variables::from_cameras(&new_cams, new_pts);
    let pre = essentiality_stats(&vars, &pairs).0;
    let post = essentiality_stats(&upgraded, &pairs).0;
    if let Some(path) = &a.output {
        save_solution(&upgraded, path)?;
    }
    let mut w = output(a.report.as_deref())?;
    writeln!(w, "residual {:e}", est.residual)?;
    writeln!(w, "realizable {}", ext.realizable)?;
    let ev = &ext.eigenvalues;
    writeln!(w, "eigenvalues {:e} {:e} {:e} {:e}", ev[0], ev[1], ev[2], ev[3])?;
    writeln!(w, "essentiality_pre {pre:e}")?;
    writeln!(w, "essentiality_post {post:e}")?;
    writeln!(w, "orthogonality_defect {defect:e}")?;
    w.flush()?;
    Ok(if ext.realizable { 0 } else { EXIT_NOT_UPGRADABLE })
}

fn run(cli: &Cli) -> rotpose::Result<u8> {
    match &cli.cmd {
        Cmd::Generate(a) => cmd_generate(a),
        Cmd::Solve(a) => cmd_solve(a),
        Cmd::Basin(a) => cmd_basin(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Upgrade(a) => cmd_upgrade(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                rotpose::Error::NotUpgradable(_) => ExitCode::from(EXIT_NOT_UPGRADABLE),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
