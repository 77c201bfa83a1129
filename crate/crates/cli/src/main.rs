//! Command-line laboratory for a stochastically forced Camassa–Holm
//! equation: profile diagnostics, single-path simulation and soliton
//! tracking, and the two seeded Monte Carlo studies (exit probability,
//! full-vs-limit convergence).
//!
//! Every command is driven by one flat key-value config file (`--config`);
//! `--seed` and `--out` override the config's base seed and output
//! directory. Reports and CSVs are pure functions of the config; wall-clock
//! timings are printed to the console only.
//!
//! Exit codes: 0 success; 2 configuration error; 3 ensemble-level failure
//! (more than 10% of paths aborted); 1 other runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use chlab_core::experiment::{emit, run_convergence, run_exit_prob, ExperimentReport, ReportRows};
use chlab_core::limit::{evolve_eta, limit_coeffs, write_limit_bundle};
use chlab_core::modulation::{parameter_residual, track, write_track_csv};
use chlab_core::noise::sample_path;
use chlab_core::operators::{hamiltonian_h1, hamiltonian_h2};
use chlab_core::solver::{evolve, h1_evolution_residual, write_bundle};
use chlab_core::{ChError, RunConfig, SolitonFamily};

const ABORT_FRACTION_LIMIT: f64 = 0.10;

#[derive(Parser)]
#[command(
    name = "chlab",
    version,
    about = "Numerical laboratory for a stochastically forced Camassa–Holm equation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run-configuration file (flat `section.key = value` lines).
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Override the config's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Also write per-path modulation-track CSVs (ensemble commands).
    #[arg(long)]
    keep_paths: bool,
    /// Worker threads for ensemble commands.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct PathArgs {
    #[command(flatten)]
    common: Common,
    /// Coupling ε (defaults to the first entry of the config's ε list).
    #[arg(long)]
    epsilon: Option<f64>,
    /// Keep every stride-th regular sample in trajectory bundles.
    #[arg(long, default_value_t = 1)]
    stride: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Build the solitary-wave profile, print diagnostics, write profile.csv.
    SolitonCheck(Common),
    /// Evolve one path and write its trajectory bundle (+ limit bundle).
    Simulate(PathArgs),
    /// Evolve one path, track the soliton through it, write track.csv.
    Modulate(PathArgs),
    /// Exit-probability study over the config's ε list.
    ExitProb(Common),
    /// Coupled full-vs-limit convergence study over the config's ε list.
    Convergence(Common),
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                ChError::Config(_)
                | ChError::InvalidGrid(_)
                | ChError::InvalidParams(_)
                | ChError::DomainTooSmall(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, ChError> {
    match cli.command {
        Command::SolitonCheck(common) => soliton_check(&common),
        Command::Simulate(args) => simulate(&args),
        Command::Modulate(args) => modulate(&args),
        Command::ExitProb(common) => ensemble(&common, run_exit_prob),
        Command::Convergence(common) => ensemble(&common, run_convergence),
    }
}

/// Load the config file and apply the command-line overrides.
fn load(common: &Common) -> Result<RunConfig, ChError> {
    let mut config = RunConfig::from_file(&common.config)?;
    if let Some(seed) = common.seed {
        config.base_seed = seed;
    }
    if let Some(out) = &common.out {
        config.out_dir = out.display().to_string();
    }
    config.validate()?;
    Ok(config)
}

fn out_dir(config: &RunConfig) -> Result<PathBuf, ChError> {
    let dir = PathBuf::from(&config.out_dir);
    std::fs::create_dir_all(&dir)
        .map_err(|e| ChError::Config(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn chosen_epsilon(config: &RunConfig, flag: Option<f64>) -> f64 {
    flag.unwrap_or(config.epsilons[0])
}

// ─────────────────────────── soliton-check ───────────────────────────────

fn soliton_check(common: &Common) -> Result<ExitCode, ChError> {
    let config = load(common)?;
    let started = Instant::now();
    let grid = config.grid()?;
    let family = SolitonFamily::new(config.c0, config.k, &grid)?;
    let profile = family.base();
    let params = profile.params();

    let peak = profile.phi().values().iter().cloned().fold(f64::MIN, f64::max);
    let residual = chlab_core::soliton::ode_residual(profile);
    let beta = params.decay_rate();
    let beta_fit = fitted_decay_rate(profile.phi().values(), grid.nodes());

    let dir = out_dir(&config)?;
    let csv_path = dir.join("profile.csv");
    chlab_core::soliton::write_profile_csv(profile, &csv_path)?;

    println!(
        "solitary wave: c = {}, k = {}, L = {}, N = {}",
        params.c(),
        params.k(),
        config.grid_length,
        config.grid_points
    );
    println!(
        "  peak height   {:.12e}  (c − 2k = {:.12e}, defect {:.3e})",
        peak,
        params.peak_height(),
        (peak - params.peak_height()).abs()
    );
    println!("  ode residual  {residual:.3e}");
    println!(
        "  decay rate    {beta:.6e} analytic, {beta_fit:.6e} fitted  (rel err {:.3e})",
        ((beta_fit - beta) / beta).abs()
    );
    println!("profile written to {}", csv_path.display());
    println!("runtime: {:.3} s", started.elapsed().as_secs_f64());
    Ok(ExitCode::SUCCESS)
}

/// Least-squares slope of ln φ over the right tail window x ∈ [L/8, 3L/8]
/// (clear of both the peak and the periodic boundary); the profile decays
/// like e^{−βx} there, so −slope estimates β.
fn fitted_decay_rate(phi: &[f64], nodes: &[f64]) -> f64 {
    let length = nodes[nodes.len() - 1] - nodes[0];
    let (lo, hi) = (length / 8.0, 3.0 * length / 8.0);
    let pts: Vec<(f64, f64)> = nodes
        .iter()
        .zip(phi)
        .filter(|&(&x, &v)| x >= lo && x <= hi && v > 0.0)
        .map(|(&x, &v)| (x, v.ln()))
        .collect();
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    -(n * sxy - sx * sy) / (n * sxx - sx * sx)
}

// ───────────────────────────── simulate ──────────────────────────────────

fn simulate(args: &PathArgs) -> Result<ExitCode, ChError> {
    let config = load(&args.common)?;
    let eps = chosen_epsilon(&config, args.epsilon);
    let started = Instant::now();

    let grid = config.grid()?;
    let family = SolitonFamily::new(config.c0, config.k, &grid)?;
    let sigma = config.sigma.build(&grid);
    let noise = sample_path(&config.measure, config.horizon, config.base_seed)?;
    let solver = config.solver_config();
    let traj = evolve(family.base().phi(), &noise, eps, &sigma, config.k, &solver)?;

    let dir = out_dir(&config)?;
    let (csv_path, manifest_path) = write_bundle(&traj, args.stride, &dir)?;

    // the matching limit path (same noise), for coupled post-processing
    let limit = limit_coeffs(&family, &sigma)?;
    let eta_traj = evolve_eta(&noise, 1.0, &limit, &solver)?;
    let limit_dir = dir.join("limit");
    std::fs::create_dir_all(&limit_dir)
        .map_err(|e| ChError::Config(format!("cannot create {}: {e}", limit_dir.display())))?;
    write_limit_bundle(&eta_traj, args.stride, &limit_dir)?;

    let u0 = family.base().phi();
    let u1 = traj.final_state();
    println!(
        "path: ε = {eps}, seed = {}, T = {}, events = {}, samples = {}",
        config.base_seed,
        config.horizon,
        noise.events().len(),
        traj.samples().len()
    );
    println!(
        "  H₁ {:.12e} → {:.12e}   H₂ {:.12e} → {:.12e}",
        hamiltonian_h1(u0),
        hamiltonian_h1(u1),
        hamiltonian_h2(u0, config.k),
        hamiltonian_h2(u1, config.k)
    );
    println!(
        "  pathwise H₁-evolution residual: {:.3e}",
        h1_evolution_residual(&traj, &sigma)
    );
    println!("trajectory bundle: {}", csv_path.display());
    println!("manifest:          {}", manifest_path.display());
    println!("limit bundle:      {}", limit_dir.join("trajectory.csv").display());
    println!("runtime: {:.3} s", started.elapsed().as_secs_f64());
    Ok(ExitCode::SUCCESS)
}

// ───────────────────────────── modulate ──────────────────────────────────

fn modulate(args: &PathArgs) -> Result<ExitCode, ChError> {
    let config = load(&args.common)?;
    let eps = chosen_epsilon(&config, args.epsilon);
    let started = Instant::now();

    let grid = config.grid()?;
    let family = SolitonFamily::new(config.c0, config.k, &grid)?;
    let sigma = config.sigma.build(&grid);
    let noise = sample_path(&config.measure, config.horizon, config.base_seed)?;
    let solver = config.solver_config();
    let traj = evolve(family.base().phi(), &noise, eps, &sigma, config.k, &solver)?;
    let tr = track(&traj, config.alpha, &family, &sigma);

    let dir = out_dir(&config)?;
    let csv_path = dir.join("track.csv");
    write_track_csv(&tr, &csv_path)?;

    let (r_x, r_c) = parameter_residual(&tr, &noise, eps);
    let last = tr.points().last();
    println!(
        "tracked: ε = {eps}, seed = {}, rows = {}, events = {}",
        config.base_seed,
        tr.points().len(),
        noise.events().len()
    );
    if let Some(p) = last {
        // the track stores η; the tube functional bounds εη (at ε = 0 the
        // raw residual itself)
        let eps_eta = if eps > 0.0 { eps * p.h1_norm_eta } else { p.h1_norm_eta };
        println!(
            "  final t = {}: c = {:.12e}, x = {:.12e}, ‖εη‖_H¹ = {eps_eta:.6e}",
            p.t, p.c, p.x
        );
    }
    match tr.exit_time() {
        Some(t) => println!("  exited the α-tube at t = {t} (α = {})", tr.alpha()),
        None => println!("  stayed inside the α-tube (α = {})", tr.alpha()),
    }
    println!("  parameter-equation residuals: r_x = {r_x:.3e}, r_c = {r_c:.3e}");
    println!("track written to {}", csv_path.display());
    println!("runtime: {:.3} s", started.elapsed().as_secs_f64());
    Ok(ExitCode::SUCCESS)
}

// ──────────────────────── ensemble experiments ───────────────────────────

fn ensemble(
    common: &Common,
    run: fn(&RunConfig, usize, bool) -> Result<ExperimentReport, ChError>,
) -> Result<ExitCode, ChError> {
    let config = load(common)?;
    let report = run(&config, common.workers, common.keep_paths)?;
    let dir = out_dir(&config)?;
    let (json_path, csv_path) = emit(&report, &dir)?;

    match &report.rows {
        ReportRows::Exit(rows) => {
            println!("epsilon       b_eps         exit_frac     stderr        n_paths");
            for r in rows {
                println!(
                    "{:<13.6e} {:<13.6e} {:<13.6e} {:<13.6e} {}",
                    r.epsilon, r.b_eps, r.exit_frac, r.stderr, r.n_paths
                );
            }
        }
        ReportRows::Convergence(rows) => {
            println!("epsilon       mean_sup_l2   d_mu          d_b           d_y           d_a");
            for r in rows {
                println!(
                    "{:<13.6e} {:<13.6e} {:<13.6e} {:<13.6e} {:<13.6e} {:<13.6e}",
                    r.epsilon, r.mean_sup_l2, r.d_mu, r.d_b, r.d_y, r.d_a
                );
            }
        }
    }
    println!(
        "paths: {} attempted, {} aborted",
        report.metadata.paths_attempted, report.metadata.aborts
    );
    println!("report: {}", json_path.display());
    println!("table:  {}", csv_path.display());
    println!("runtime: {:.3} s", report.runtime_seconds);

    if report.abort_fraction() > ABORT_FRACTION_LIMIT {
        eprintln!(
            "error: {:.1}% of paths aborted (limit {:.0}%)",
            100.0 * report.abort_fraction(),
            100.0 * ABORT_FRACTION_LIMIT
        );
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}
