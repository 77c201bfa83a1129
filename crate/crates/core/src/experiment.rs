//! Monte Carlo experiment drivers and result persistence.
//!
//! Two studies share one harness:
//!
//! * **exit probability** — for each coupling ε, evolve M independent paths
//!   from the soliton, track them, and record the fraction that leave the
//!   modulation tube before the horizon, alongside the exit-rate budget b(ε);
//! * **convergence** — per seed, drive the full dynamics and the
//!   small-coupling limit with the *same* noise path (coupled comparison) and
//!   record sup-discrepancies of the remainder and of the modulation
//!   coefficients against their limits.
//!
//! Determinism contract: every report is a pure function of its `RunConfig`.
//! Paths are independent tasks with statically assigned seeds
//! (`base_seed..base_seed+M−1`, shared across ε); task results are collected,
//! sorted by seed, and reduced sequentially, so 1 worker and W workers give
//! byte-identical reports. Wall-clock runtime is kept on the in-memory report
//! only and never written to the emitted files.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{ChError, Result};
use crate::grid::Field;
use crate::limit::{compare_remainder, evolve_eta, limit_coeffs, LimitCoefficients};
use crate::modulation::{track, write_track_csv, ModulationTrack, SolitonFamily};
use crate::noise::{b_of_eps, sample_path};
use crate::solver::{evolve, SolverConfig, Trajectory, SCHEDULE_MERGE_TOL};

// ────────────────────────────── Report types ─────────────────────────────

/// Run identity and path accounting carried by every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    /// Base seed; path j of the ensemble uses seed `seed + j`.
    pub seed: u64,
    /// SHA-256 of the canonical config text, for replay.
    pub config_hash: String,
    pub version: String,
    /// Total path tasks launched (|ε list| · n_paths).
    pub paths_attempted: usize,
    /// Path tasks that failed (solver abort, I/O); failures are counted
    /// here and excluded from the row statistics, never fatal.
    pub aborts: usize,
}

/// One ε-row of the exit-probability study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitRow {
    pub epsilon: f64,
    /// Exit-rate budget b(ε) for this σ and measure (~ε² for small ε).
    pub b_eps: f64,
    /// Fraction of contributing paths that left the α-tube by the horizon.
    pub exit_frac: f64,
    /// Binomial standard error √(p(1−p)/M) over the contributing paths.
    pub stderr: f64,
    /// Contributing (non-aborted) paths behind this row.
    pub n_paths: usize,
}

/// One ε-row of the convergence study: means over seeds of pathwise
/// sup-discrepancies on t ≤ T ∧ τ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub epsilon: f64,
    /// mean over seeds of sup‖η^ε − η‖_{L²}.
    pub mean_sup_l2: f64,
    /// mean over seeds of sup|μ^ε(t) − μ(t)|.
    pub d_mu: f64,
    /// mean over seeds of sup|b^ε(t) − b(t)|.
    pub d_b: f64,
    /// mean over seeds of sup|y^ε(t) − y(η(t))|.
    pub d_y: f64,
    /// mean over seeds of sup|a^ε(t) − a(η(t))|.
    pub d_a: f64,
}

/// Kind-tagged result table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "rows")]
pub enum ReportRows {
    #[serde(rename = "exit-prob")]
    Exit(Vec<ExitRow>),
    #[serde(rename = "convergence")]
    Convergence(Vec<ConvergenceRow>),
}

/// Full experiment result. Serializes to the JSON report; the wall-clock
/// field is skipped so emitted files depend on the config alone.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub metadata: ReportMetadata,
    #[serde(flatten)]
    pub rows: ReportRows,
    /// Wall-clock duration of the run; console-only, never emitted.
    #[serde(skip)]
    pub runtime_seconds: f64,
}

impl ExperimentReport {
    /// Fraction of launched path tasks that failed. The conventional
    /// ensemble-failure threshold for exit status is 10%.
    pub fn abort_fraction(&self) -> f64 {
        if self.metadata.paths_attempted == 0 {
            0.0
        } else {
            self.metadata.aborts as f64 / self.metadata.paths_attempted as f64
        }
    }
}

// ───────────────────────────── Shared context ────────────────────────────

/// Immutable per-run state shared (by reference) across worker tasks.
struct RunContext {
    family: SolitonFamily,
    sigma: Field,
    solver: SolverConfig,
}

impl RunContext {
    fn new(config: &RunConfig) -> Result<Self> {
        let grid = config.grid()?;
        let family = SolitonFamily::new(config.c0, config.k, &grid)?;
        let sigma = config.sigma.build(&grid);
        Ok(Self {
            family,
            sigma,
            solver: config.solver_config(),
        })
    }

    /// Evolve one full path from the soliton and track it.
    fn evolve_and_track(
        &self,
        config: &RunConfig,
        eps: f64,
        seed: u64,
    ) -> Result<(Trajectory, ModulationTrack)> {
        let noise = sample_path(&config.measure, config.horizon, seed)?;
        let traj = evolve(
            self.family.base().phi(),
            &noise,
            eps,
            &self.sigma,
            self.family.k(),
            &self.solver,
        )?;
        let tr = track(&traj, config.alpha, &self.family, &self.sigma);
        Ok((traj, tr))
    }
}

fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| ChError::Config(format!("worker pool: {e}")))
}

fn prepare_paths_dir(config: &RunConfig, keep_paths: bool) -> Result<Option<PathBuf>> {
    if !keep_paths {
        return Ok(None);
    }
    let dir = Path::new(&config.out_dir).join("paths");
    std::fs::create_dir_all(&dir)
        .map_err(|e| ChError::Config(format!("cannot create {}: {e}", dir.display())))?;
    Ok(Some(dir))
}

fn metadata(config: &RunConfig, aborts: usize) -> ReportMetadata {
    ReportMetadata {
        seed: config.base_seed,
        config_hash: config.config_hash(),
        version: env!("CARGO_PKG_VERSION").into(),
        paths_attempted: config.epsilons.len() * config.n_paths,
        aborts,
    }
}

// ─────────────────────── Exit-probability experiment ─────────────────────

/// For each ε (largest first), run `n_paths` independent paths with seeds
/// `base_seed..base_seed+n_paths−1` (the same seeds across ε), track each
/// path and record the exit fraction with its binomial standard error and
/// the budget b(ε). Per-path failures are counted in the metadata and
/// excluded from the fraction; they never abort the ensemble.
pub fn run_exit_prob(config: &RunConfig, workers: usize, keep_paths: bool) -> Result<ExperimentReport> {
    config.validate()?;
    let started = Instant::now();
    let ctx = RunContext::new(config)?;
    let pool = worker_pool(workers)?;
    let paths_dir = prepare_paths_dir(config, keep_paths)?;

    let mut rows = Vec::with_capacity(config.epsilons.len());
    let mut aborts = 0usize;
    for &eps in &config.epsilons {
        let mut outcomes: Vec<(u64, Result<bool>)> = pool.install(|| {
            (0..config.n_paths)
                .into_par_iter()
                .map(|j| {
                    let seed = config.base_seed + j as u64;
                    let outcome = ctx.evolve_and_track(config, eps, seed).and_then(|(_, tr)| {
                        if let Some(dir) = &paths_dir {
                            write_track_csv(&tr, &dir.join(format!("exit_eps{eps}_seed{seed}.csv")))?;
                        }
                        Ok(tr.exited())
                    });
                    (seed, outcome)
                })
                .collect()
        });
        outcomes.sort_by_key(|&(seed, _)| seed);

        let (mut exits, mut contributing) = (0usize, 0usize);
        for (_, outcome) in &outcomes {
            match outcome {
                Ok(exited) => {
                    contributing += 1;
                    exits += *exited as usize;
                }
                Err(_) => aborts += 1,
            }
        }
        let p = if contributing > 0 {
            exits as f64 / contributing as f64
        } else {
            0.0
        };
        let stderr = if contributing > 0 {
            (p * (1.0 - p) / contributing as f64).sqrt()
        } else {
            0.0
        };
        rows.push(ExitRow {
            epsilon: eps,
            b_eps: b_of_eps(eps, &ctx.sigma, &config.measure),
            exit_frac: p,
            stderr,
            n_paths: contributing,
        });
    }

    Ok(ExperimentReport {
        metadata: metadata(config, aborts),
        rows: ReportRows::Exit(rows),
        runtime_seconds: started.elapsed().as_secs_f64(),
    })
}

// ───────────────────────── Convergence experiment ────────────────────────

/// Pathwise sup-discrepancies of one (seed, ε) pair on t ≤ T ∧ τ.
struct Discrepancies {
    sup_l2: f64,
    d_mu: f64,
    d_b: f64,
    d_y: f64,
    d_a: f64,
}

/// Sup over the tracked window of the four coefficient discrepancies
/// against the limit: (μ(t), b(t)) from the moving frame and (y(η), a(η))
/// evaluated on the limit remainder at the matched sample times.
fn coefficient_sups(
    tr: &ModulationTrack,
    eta_traj: &Trajectory,
    limit: &LimitCoefficients,
    t_max: f64,
) -> (f64, f64, f64, f64) {
    let (mut d_mu, mut d_b, mut d_y, mut d_a) = (0.0_f64, 0.0_f64, 0.0_f64, 0.0_f64);
    for (p, s) in tr.points().iter().zip(eta_traj.samples()) {
        if p.t > t_max + SCHEDULE_MERGE_TOL {
            break;
        }
        let (mu, b) = limit.mu_b_at(p.t);
        d_mu = d_mu.max((p.coeffs.mu - mu).abs());
        d_b = d_b.max((p.coeffs.b - b).abs());
        d_y = d_y.max((p.coeffs.y - limit.y_of(&s.state)).abs());
        d_a = d_a.max((p.coeffs.a - limit.a_of(&s.state)).abs());
    }
    (d_mu, d_b, d_y, d_a)
}

/// Coupled convergence study: per seed, one noise path drives both the full
/// dynamics at every ε and the limit equation (solved once); discrepancies
/// are measured at matched sample times up to the exit time and averaged
/// over seeds. Per-path failures are counted, never fatal; a failed limit
/// solve forfeits all ε entries of that seed.
pub fn run_convergence(
    config: &RunConfig,
    workers: usize,
    keep_paths: bool,
) -> Result<ExperimentReport> {
    config.validate()?;
    let started = Instant::now();
    let ctx = RunContext::new(config)?;
    let limit = limit_coeffs(&ctx.family, &ctx.sigma)?;
    let pool = worker_pool(workers)?;
    let paths_dir = prepare_paths_dir(config, keep_paths)?;

    // one task per seed: (seed, per-ε outcome in ε-list order)
    let mut per_seed: Vec<(u64, Vec<Option<Discrepancies>>)> = pool.install(|| {
        (0..config.n_paths)
            .into_par_iter()
            .map(|j| {
                let seed = config.base_seed + j as u64;
                (seed, convergence_seed_task(&ctx, config, &limit, seed, paths_dir.as_deref()))
            })
            .collect()
    });
    per_seed.sort_by_key(|&(seed, _)| seed);

    let mut aborts = 0usize;
    let mut rows = Vec::with_capacity(config.epsilons.len());
    for (i, &eps) in config.epsilons.iter().enumerate() {
        let mut sums = Discrepancies {
            sup_l2: 0.0,
            d_mu: 0.0,
            d_b: 0.0,
            d_y: 0.0,
            d_a: 0.0,
        };
        let mut contributing = 0usize;
        for (_, outcomes) in &per_seed {
            match &outcomes[i] {
                Some(d) => {
                    contributing += 1;
                    sums.sup_l2 += d.sup_l2;
                    sums.d_mu += d.d_mu;
                    sums.d_b += d.d_b;
                    sums.d_y += d.d_y;
                    sums.d_a += d.d_a;
                }
                None => aborts += 1,
            }
        }
        let m = (contributing.max(1)) as f64;
        rows.push(ConvergenceRow {
            epsilon: eps,
            mean_sup_l2: sums.sup_l2 / m,
            d_mu: sums.d_mu / m,
            d_b: sums.d_b / m,
            d_y: sums.d_y / m,
            d_a: sums.d_a / m,
        });
    }

    Ok(ExperimentReport {
        metadata: metadata(config, aborts),
        rows: ReportRows::Convergence(rows),
        runtime_seconds: started.elapsed().as_secs_f64(),
    })
}

fn convergence_seed_task(
    ctx: &RunContext,
    config: &RunConfig,
    limit: &LimitCoefficients,
    seed: u64,
    paths_dir: Option<&Path>,
) -> Vec<Option<Discrepancies>> {
    let shared = (|| -> Result<_> {
        let noise = sample_path(&config.measure, config.horizon, seed)?;
        let eta_traj = evolve_eta(&noise, 1.0, limit, &ctx.solver)?;
        Ok(eta_traj)
    })();
    let eta_traj = match shared {
        Ok(t) => t,
        // no limit path ⇒ nothing to compare against for any ε
        Err(_) => return config.epsilons.iter().map(|_| None).collect(),
    };

    config
        .epsilons
        .iter()
        .map(|&eps| {
            let one = (|| -> Result<Discrepancies> {
                let (_, tr) = ctx.evolve_and_track(config, eps, seed)?;
                if let Some(dir) = paths_dir {
                    write_track_csv(&tr, &dir.join(format!("conv_eps{eps}_seed{seed}.csv")))?;
                }
                let t_max = tr.exit_time().unwrap_or(config.horizon);
                let sup_l2 = compare_remainder(&tr, &eta_traj, t_max);
                let (d_mu, d_b, d_y, d_a) = coefficient_sups(&tr, &eta_traj, limit, t_max);
                Ok(Discrepancies {
                    sup_l2,
                    d_mu,
                    d_b,
                    d_y,
                    d_a,
                })
            })();
            one.ok()
        })
        .collect()
}

// ──────────────────────────── Persistence ────────────────────────────────

/// Write `report.json` (full report) and `report.csv` (per-ε table) into
/// `dir`, creating it if needed. Returns the two paths. Output bytes are a
/// pure function of the report contents (runtime excluded), so identical
/// configs reproduce identical files.
pub fn emit(report: &ExperimentReport, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)
        .map_err(|e| ChError::Config(format!("cannot create {}: {e}", dir.display())))?;
    let json_path = dir.join("report.json");
    let csv_path = dir.join("report.csv");

    let json = serde_json::to_string_pretty(report)?;
    std::fs::write(&json_path, json.as_bytes())
        .map_err(|e| ChError::Config(format!("cannot write {}: {e}", json_path.display())))?;

    let mut wtr = csv::Writer::from_path(&csv_path)?;
    match &report.rows {
        ReportRows::Exit(rows) => {
            wtr.write_record(["epsilon", "b_eps", "exit_frac", "stderr", "n_paths"])?;
            for r in rows {
                wtr.write_record([
                    format!("{:.12e}", r.epsilon),
                    format!("{:.12e}", r.b_eps),
                    format!("{:.12e}", r.exit_frac),
                    format!("{:.12e}", r.stderr),
                    r.n_paths.to_string(),
                ])?;
            }
        }
        ReportRows::Convergence(rows) => {
            wtr.write_record(["epsilon", "mean_sup_l2", "d_mu", "d_b", "d_y", "d_a"])?;
            for r in rows {
                wtr.write_record([
                    format!("{:.12e}", r.epsilon),
                    format!("{:.12e}", r.mean_sup_l2),
                    format!("{:.12e}", r.d_mu),
                    format!("{:.12e}", r.d_b),
                    format!("{:.12e}", r.d_y),
                    format!("{:.12e}", r.d_a),
                ])?;
            }
        }
    }
    wtr.flush().map_err(std::io::Error::from)?;
    Ok((json_path, csv_path))
}

// ───────────────────────────────── Tests ─────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SigmaSpec;
    use crate::noise::IntensityMeasure;

    /// Small, fast base config: short horizon, coarse recording. α is set
    /// generously so the deterministic-ish paths below never exit.
    fn tiny_config() -> RunConfig {
        RunConfig {
            grid_length: 60.0,
            grid_points: 1024,
            c0: 3.0,
            k: 1.0,
            measure: IntensityMeasure::default_symmetric(),
            sigma: SigmaSpec::Sine {
                mean: 1.0,
                amp: 0.3,
            },
            dt: 1e-3,
            record_every: 50,
            epsilons: vec![0.04, 0.0],
            alpha: 0.5,
            horizon: 0.2,
            n_paths: 2,
            base_seed: 11,
            out_dir: "out".into(),
        }
    }

    fn emitted_bytes(report: &ExperimentReport, dir: &Path) -> (String, String) {
        let (json_path, csv_path) = emit(report, dir).unwrap();
        (
            std::fs::read_to_string(json_path).unwrap(),
            std::fs::read_to_string(csv_path).unwrap(),
        )
    }

    #[test]
    fn exit_report_is_deterministic_across_workers_and_reruns() {
        let config = tiny_config();
        let tmp = tempfile::tempdir().unwrap();
        let one = run_exit_prob(&config, 1, false).unwrap();
        let two = run_exit_prob(&config, 2, false).unwrap();
        let rerun = run_exit_prob(&config, 1, false).unwrap();

        let (json1, csv1) = emitted_bytes(&one, &tmp.path().join("a"));
        let (json2, csv2) = emitted_bytes(&two, &tmp.path().join("b"));
        let (json3, csv3) = emitted_bytes(&rerun, &tmp.path().join("c"));
        assert_eq!(json1, json2, "worker count changed the JSON report");
        assert_eq!(csv1, csv2, "worker count changed the CSV report");
        assert_eq!(json1, json3, "re-run changed the JSON report");
        assert_eq!(csv1, csv3, "re-run changed the CSV report");

        // row shape: one row per ε, in ε-list order
        let ReportRows::Exit(rows) = &one.rows else {
            panic!("exit study must produce exit rows");
        };
        assert_eq!(rows.len(), config.epsilons.len());
        assert_eq!(rows[0].epsilon, 0.04);
        assert_eq!(rows[1].epsilon, 0.0);
        for r in rows {
            assert!((0.0..=1.0).contains(&r.exit_frac));
            assert_eq!(r.n_paths, config.n_paths, "no path should abort here");
        }
        // α = 0.5 is far above any drift these short paths accumulate,
        // and the ε = 0 row is exactly the deterministic soliton
        assert_eq!(rows[1].exit_frac, 0.0);
        assert_eq!(rows[1].b_eps, 0.0);
        assert_eq!(one.metadata.aborts, 0);
        assert_eq!(one.metadata.paths_attempted, 4);
        assert!(one.runtime_seconds > 0.0);
    }

    #[test]
    fn json_report_mirrors_rows_and_metadata() {
        let config = tiny_config();
        let report = run_exit_prob(&config, 2, false).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let (json, csv) = emitted_bytes(&report, tmp.path());

        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(value["kind"], "exit-prob");
        assert_eq!(value["rows"].as_array().unwrap().len(), 2);
        assert_eq!(
            value["metadata"]["config_hash"].as_str().unwrap(),
            config.config_hash()
        );
        assert_eq!(value["metadata"]["seed"], 11);
        assert!(value.get("runtime_seconds").is_none(), "runtime must not be emitted");

        // full round trip back into the typed report
        let back: ExperimentReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.metadata, report.metadata);
        assert_eq!(back.rows, report.rows);
        assert_eq!(back.runtime_seconds, 0.0, "runtime is not persisted");

        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("epsilon,b_eps,exit_frac,stderr,n_paths"));
        assert_eq!(lines.count(), 2);
    }

    #[test]
    fn keep_paths_writes_one_track_per_path() {
        let mut config = tiny_config();
        config.epsilons = vec![0.04];
        let tmp = tempfile::tempdir().unwrap();
        config.out_dir = tmp.path().join("run").to_str().unwrap().to_string();
        run_exit_prob(&config, 2, true).unwrap();

        let dir = Path::new(&config.out_dir).join("paths");
        let mut names: Vec<String> = std::fs::read_dir(&dir)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(names, ["exit_eps0.04_seed11.csv", "exit_eps0.04_seed12.csv"]);
        let text = std::fs::read_to_string(dir.join(&names[0])).unwrap();
        assert!(text.starts_with("t,c_eps,x_eps,h1_norm_eta,"));
    }

    #[test]
    fn solver_failures_are_counted_not_fatal() {
        let mut config = tiny_config();
        // dt so coarse the advective CFL guard trips on the first substep
        config.dt = 0.05;
        config.epsilons = vec![0.04];
        config.measure = IntensityMeasure::empty();
        let report = run_exit_prob(&config, 1, false).unwrap();
        assert_eq!(report.metadata.aborts, 2);
        assert!(report.abort_fraction() > 0.10);
        let ReportRows::Exit(rows) = &report.rows else {
            panic!("exit study must produce exit rows");
        };
        assert_eq!(rows[0].n_paths, 0);
        assert_eq!(rows[0].exit_frac, 0.0);
    }

    #[test]
    fn convergence_constant_sigma_is_degenerate_and_deterministic() {
        let mut config = tiny_config();
        config.sigma = SigmaSpec::Constant(1.0);
        config.epsilons = vec![0.04, 0.02];
        let one = run_convergence(&config, 1, false).unwrap();
        let two = run_convergence(&config, 2, false).unwrap();

        let tmp = tempfile::tempdir().unwrap();
        let (json1, csv1) = emitted_bytes(&one, &tmp.path().join("a"));
        let (json2, csv2) = emitted_bytes(&two, &tmp.path().join("b"));
        assert_eq!(json1, json2, "worker count changed the JSON report");
        assert_eq!(csv1, csv2, "worker count changed the CSV report");

        let ReportRows::Convergence(rows) = &one.rows else {
            panic!("convergence study must produce convergence rows");
        };
        assert_eq!(rows.len(), 2);
        // constant σ: μ^ε = −σ and b^ε = 0 exactly, and the limit remainder
        // vanishes, so every discrepancy sits at the numerical floor
        for r in rows {
            assert!(r.d_mu < 1e-6, "d_mu = {:.3e} at ε = {}", r.d_mu, r.epsilon);
            assert!(r.d_b < 1e-6, "d_b = {:.3e} at ε = {}", r.d_b, r.epsilon);
            assert!(
                r.mean_sup_l2 < 1e-4,
                "mean_sup_l2 = {:.3e} at ε = {}",
                r.mean_sup_l2,
                r.epsilon
            );
            assert!(r.d_y < 1e-4);
            assert!(r.d_a < 1e-4);
        }
        assert_eq!(one.metadata.aborts, 0);

        let mut lines = csv1.lines();
        assert_eq!(lines.next(), Some("epsilon,mean_sup_l2,d_mu,d_b,d_y,d_a"));
        assert_eq!(lines.count(), 2);
    }

    #[test]
    fn convergence_keep_paths_names_by_eps_and_seed() {
        let mut config = tiny_config();
        config.epsilons = vec![0.04];
        config.n_paths = 1;
        let tmp = tempfile::tempdir().unwrap();
        config.out_dir = tmp.path().join("run").to_str().unwrap().to_string();
        run_convergence(&config, 1, true).unwrap();
        assert!(Path::new(&config.out_dir)
            .join("paths/conv_eps0.04_seed11.csv")
            .is_file());
    }
}
