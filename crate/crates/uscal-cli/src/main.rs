//! Command-line surface: `calibrate` runs ingest -> RANSAC -> refinement on
//! an acquisition file, `simulate` reproduces the synthetic experiment grid,
//! `validate` scores a calibration against cross-wire phantom records, and
//! `selftest` exercises the noise-free recovery oracles.
//!
//! Exit codes: 0 success, 2 usage, 3 parse/invariant, 4 solver failure,
//! 5 other I/O.

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use std::process::ExitCode;
use uscal_core::calib2d::ScanPlane;
use uscal_core::io::{self, IoError, ProbeKind};
use uscal_core::refine::{refine_2d, refine_3d, RefineConfig};
use uscal_core::robust::{
    diagnose_degeneracy, ransac, Linear2d, Linear3d, Minimal2d, Minimal2dGeneral, Minimal3d,
    RansacConfig, RansacResult, RobustError, SampleSolver,
};
use uscal_core::sim::{self, median, SimConfig};
use uscal_core::{Line3, Point3, Similarity};

const SEED_ENV: &str = "USCAL_SEED";

#[derive(Parser)]
#[command(name = "uscal", version, about = "Freehand 2D/3D ultrasound probe calibration from a tracked needle")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate from an acquisition file: ingest, RANSAC, refinement.
    Calibrate(CalibrateArgs),
    /// Run the synthetic experiment grid and write a trial CSV.
    Simulate(SimulateArgs),
    /// Score a calibration against phantom records (PRA per record).
    Validate(ValidateArgs),
    /// Run the noise-free recovery oracles and print pass/fail lines.
    Selftest,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    #[value(name = "2d")]
    TwoD,
    #[value(name = "3d")]
    ThreeD,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SolverKind {
    Linear,
    Minimal,
    MinimalGeneral,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    mode: Mode,
    #[arg(long, value_enum)]
    solver: SolverKind,
    #[arg(long, default_value_t = 5.0)]
    ransac_threshold_mm: f64,
    /// RANSAC seed; defaults to $USCAL_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output: PathBuf,
    /// Plane-pair anchor in the marker frame, "x,y,z" (mm).
    #[arg(long, value_parser = parse_anchor, default_value = "0,0,0")]
    anchor: Vector3<f64>,
    /// Scan-plane offset for the general 2D minimal route (US units).
    #[arg(long, default_value_t = 1.0)]
    plane_k: f64,
    #[arg(long, default_value_t = 500)]
    max_iterations: usize,
}

#[derive(Args)]
struct SimulateArgs {
    /// Experiment configuration (JSON; missing fields take defaults).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Overrides the config seed; defaults to $USCAL_SEED, then the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    calibration: PathBuf,
    #[arg(long)]
    phantom: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

fn parse_anchor(text: &str) -> Result<Vector3<f64>, String> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        return Err("expected x,y,z".to_string());
    }
    let mut v = [0.0; 3];
    for (slot, part) in v.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse::<f64>()
            .map_err(|e| format!("bad coordinate {part:?}: {e}"))?;
    }
    Ok(Vector3::from(v))
}

enum CliError {
    Usage(String),
    Parse(String),
    Solver(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Parse(_) => 3,
            CliError::Solver(_) => 4,
            CliError::Io(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Parse(m) | CliError::Solver(m) | CliError::Io(m) => m,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Io(inner) => CliError::Io(inner.to_string()),
            other => CliError::Parse(other.to_string()),
        }
    }
}

impl From<RobustError> for CliError {
    fn from(e: RobustError) -> Self {
        CliError::Solver(e.to_string())
    }
}

fn env_seed() -> Option<u64> {
    std::env::var(SEED_ENV).ok().and_then(|v| v.parse().ok())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Calibrate(args) => calibrate(args),
        Command::Simulate(args) => simulate(args),
        Command::Validate(args) => validate(args),
        Command::Selftest => selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run_pipeline<S>(
    acqs: &[S::Acq],
    solver: &S,
    cfg: &RansacConfig,
) -> Result<(RansacResult, Vec<S::Acq>), CliError>
where
    S: SampleSolver,
{
    let consensus = ransac(acqs, solver, cfg)?;
    let inliers: Vec<S::Acq> = acqs
        .iter()
        .zip(&consensus.inlier_mask)
        .filter(|(_, &m)| m)
        .map(|(a, _)| a.clone())
        .collect();
    Ok((consensus, inliers))
}

fn calibrate(args: CalibrateArgs) -> Result<(), CliError> {
    let seed = args.seed.or_else(env_seed).unwrap_or(0);
    let anchor: Point3 = args.anchor;
    let solver_name = match (args.mode, args.solver) {
        (Mode::ThreeD, SolverKind::Linear) => "linear3d",
        (Mode::ThreeD, SolverKind::Minimal) => "minimal3d",
        (Mode::TwoD, SolverKind::Linear) => "linear2d",
        (Mode::TwoD, SolverKind::Minimal) => "minimal2d",
        (Mode::TwoD, SolverKind::MinimalGeneral) => "minimal2d_general",
        (Mode::ThreeD, SolverKind::MinimalGeneral) => {
            return Err(CliError::Usage(
                "--solver minimal-general applies to --mode 2d only".to_string(),
            ))
        }
    };

    let (calibration, lines, n_records) = match args.mode {
        Mode::ThreeD => {
            let file: io::AcquisitionFile3 = io::read_json(&args.input)?;
            let acqs = io::ingest_3d(&file)?;
            let lines: Vec<Line3> = acqs.iter().map(|a| a.tracked_line.clone()).collect();
            let cfg = |m: usize| RansacConfig {
                threshold_mm: args.ransac_threshold_mm,
                max_iterations: args.max_iterations,
                min_inliers: m,
                rng_seed: seed,
                ..RansacConfig::default()
            };
            let (consensus, inliers) = match args.solver {
                SolverKind::Linear => {
                    let s = Linear3d { anchor };
                    run_pipeline(&acqs, &s, &cfg(s.sample_size()))?
                }
                _ => {
                    let s = Minimal3d { anchor };
                    run_pipeline(&acqs, &s, &cfg(s.sample_size()))?
                }
            };
            let refined = refine_3d(&inliers, &consensus.model, &RefineConfig::default())
                .map_err(|e| CliError::Solver(e.to_string()))?;
            let calibration = io::calibration_from_similarity(
                &refined,
                ProbeKind::ThreeD,
                solver_name,
                seed,
                args.ransac_threshold_mm,
                consensus.inlier_mask.clone(),
                consensus.mean_inlier_residual,
                consensus.iterations_used,
            );
            (calibration, lines, acqs.len())
        }
        Mode::TwoD => {
            let file: io::AcquisitionFile2 = io::read_json(&args.input)?;
            let acqs = io::ingest_2d(&file)?;
            let lines: Vec<Line3> = acqs.iter().map(|a| a.tracked_line.clone()).collect();
            let cfg = |m: usize| RansacConfig {
                threshold_mm: args.ransac_threshold_mm,
                max_iterations: args.max_iterations,
                min_inliers: m,
                rng_seed: seed,
                ..RansacConfig::default()
            };
            let (consensus, inliers) = match args.solver {
                SolverKind::Linear => {
                    let s = Linear2d { anchor };
                    run_pipeline(&acqs, &s, &cfg(s.sample_size()))?
                }
                SolverKind::Minimal => {
                    let s = Minimal2d { anchor };
                    run_pipeline(&acqs, &s, &cfg(s.sample_size()))?
                }
                SolverKind::MinimalGeneral => {
                    let s = Minimal2dGeneral {
                        anchor,
                        plane: ScanPlane { k: args.plane_k },
                    };
                    run_pipeline(&acqs, &s, &cfg(s.sample_size()))?
                }
            };
            let refined = refine_2d(&inliers, &consensus.model, &RefineConfig::default())
                .map_err(|e| CliError::Solver(e.to_string()))?;
            let calibration = io::calibration_from_similarity(
                &refined,
                ProbeKind::TwoD,
                solver_name,
                seed,
                args.ransac_threshold_mm,
                consensus.inlier_mask.clone(),
                consensus.mean_inlier_residual,
                consensus.iterations_used,
            );
            (calibration, lines, acqs.len())
        }
    };

    let flags = diagnose_degeneracy(&lines);
    if flags.any() {
        eprintln!(
            "warning: degenerate needle configuration (parallel={}, concurrent={}, coplanar={})",
            flags.parallel, flags.concurrent, flags.coplanar
        );
    }

    io::write_json(&args.output, &calibration)?;
    let angle_deg = 2.0
        * calibration.quaternion_wxyz[0]
            .abs()
            .clamp(0.0, 1.0)
            .acos()
            .to_degrees();
    println!("solver:            {solver_name}");
    println!("records:           {n_records}");
    println!(
        "inliers:           {}/{} (mean residual {:.3} mm)",
        calibration.inlier_count, n_records, calibration.mean_inlier_residual_mm
    );
    println!("scale:             {:.6} mm/us-unit", calibration.scale);
    println!(
        "translation (mm):  [{:.3}, {:.3}, {:.3}]",
        calibration.translation_mm[0], calibration.translation_mm[1], calibration.translation_mm[2]
    );
    println!("rotation angle:    {angle_deg:.3} deg");
    println!("written:           {}", args.output.display());
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<(), CliError> {
    let mut cfg: SimConfig = io::read_json(&args.config)?;
    if let Some(seed) = args.seed.or_else(env_seed) {
        cfg.rng_seed = seed;
    }
    let reports = sim::run_experiment(&cfg);
    let mut buf = Vec::new();
    io::write_trials_csv(&reports, &mut buf).map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(&args.output, &buf).map_err(|e| CliError::Io(e.to_string()))?;
    let failed = reports.iter().filter(|r| r.failed).count();
    println!(
        "trials: {} ({} failed), written: {}",
        reports.len(),
        failed,
        args.output.display()
    );
    Ok(())
}

fn validate(args: ValidateArgs) -> Result<(), CliError> {
    let calibration: io::CalibrationFile = io::read_json(&args.calibration)?;
    let sim_model = io::similarity_from_calibration(&calibration)?;
    let pairs = match io::peek_probe_kind(&args.phantom)? {
        ProbeKind::ThreeD => {
            let file: io::PhantomFile3 = io::read_json(&args.phantom)?;
            io::phantom_pairs_3d(&file)?
        }
        ProbeKind::TwoD => {
            let file: io::PhantomFile2 = io::read_json(&args.phantom)?;
            io::phantom_pairs_2d(&file)?
        }
    };
    let pra: Vec<f64> = pairs
        .iter()
        .map(|(us, tracked)| sim::pra(&sim_model, *us, *tracked))
        .collect();
    let mut buf = Vec::new();
    io::write_pra_csv(&pra, &mut buf).map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(&args.output, &buf).map_err(|e| CliError::Io(e.to_string()))?;
    println!(
        "records: {}, median PRA {:.3} mm, written: {}",
        pra.len(),
        median(&pra),
        args.output.display()
    );
    Ok(())
}

fn rotation_error_deg(a: &Similarity, b: &Similarity) -> f64 {
    uscal_core::rotation_error(&a.rotation_matrix(), &b.rotation_matrix()).to_degrees()
}

fn selftest() -> Result<(), CliError> {
    let mut failures = 0usize;
    let mut check = |name: &str, ok: bool| {
        println!("selftest {name}: {}", if ok { "ok" } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };

    let cfg = SimConfig {
        noise_us_sigma: 0.0,
        noise_track_sigma_mm: 0.0,
        n_lines: 12,
        rng_seed: 7,
        ..SimConfig::default()
    };
    let scene = sim::generate_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(cfg.rng_seed));
    let anchor = Point3::zeros();
    let tol = |sim_est: &Similarity| {
        rotation_error_deg(sim_est, &scene.a_gt) < 1e-4
            && (sim_est.translation - scene.a_gt.translation).norm() < 1e-5
            && (sim_est.scale - scene.a_gt.scale).abs() < 1e-8
    };
    let best_of = |set: &uscal_core::SolutionSet| {
        set.candidates.iter().any(tol)
    };

    check(
        "linear 3d recovery",
        uscal_core::calib3d::solve_linear_3d(&scene.pool3d[..3], anchor)
            .map(|s| tol(&s))
            .unwrap_or(false),
    );
    check(
        "minimal 3d recovery",
        uscal_core::calib3d::solve_minimal_3d(&scene.pool3d[..2], anchor)
            .map(|s| best_of(&s))
            .unwrap_or(false),
    );
    check(
        "linear 2d recovery",
        uscal_core::calib2d::solve_linear_2d(&scene.pool2d[..5], anchor)
            .map(|s| tol(&s))
            .unwrap_or(false),
    );
    check(
        "minimal 2d recovery",
        uscal_core::calib2d::solve_minimal_2d(&scene.pool2d[..4], anchor)
            .map(|s| best_of(&s))
            .unwrap_or(false),
    );
    check(
        "minimal 2d general recovery",
        uscal_core::calib2d::solve_minimal_2d_general(
            &scene.pool2d[..4],
            anchor,
            &ScanPlane::default(),
        )
        .map(|s| best_of(&s))
        .unwrap_or(false),
    );

    let dir = Vector3::new(0.3, 0.8, 0.5).normalize();
    let parallel: Vec<Line3> = (0..4)
        .map(|i| {
            let base = Vector3::new(20.0 * i as f64, -10.0 * i as f64, 40.0);
            Line3::new(base, base + 200.0 * dir).expect("valid line")
        })
        .collect();
    check(
        "degeneracy detection",
        diagnose_degeneracy(&parallel).parallel,
    );

    if failures > 0 {
        Err(CliError::Solver(format!("{failures} selftest(s) failed")))
    } else {
        println!("selftest: all checks passed");
        Ok(())
    }
}
