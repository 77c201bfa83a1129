//! Experiment configuration: a flat, dotted-key text format.
//!
//! A run is fully described by a small plain-text file, one `section.key =
//! value` pair per line (`#` starts a comment):
//!
//! ```text
//! grid.L = 80
//! grid.N = 2048
//! soliton.c0 = 3
//! soliton.k = 1
//! noise.atoms = 0.5:1,-0.5:1
//! noise.sigma = sine:1,0.3
//! solver.dt = 0.001
//! solver.record_every = 10
//! experiment.epsilon = 0.08,0.04,0.02
//! experiment.alpha = 0.05
//! experiment.T = 2
//! experiment.n_paths = 200
//! experiment.base_seed = 0
//! output.dir = out
//! ```
//!
//! `print` emits the canonical form (keys in the order above, floats in
//! shortest round-trip notation), `parse` accepts any order, and
//! `parse(print(c)) == c` exactly. The SHA-256 hash of the canonical form
//! identifies a run in reports.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::error::{ChError, Result};
use crate::grid::{Field, PeriodicGrid};
use crate::noise::{constant_sigma, sine_sigma, IntensityMeasure};
use crate::soliton::SolitonParams;
use crate::solver::SolverConfig;

// ─────────────────────────── σ specification ─────────────────────────────

/// Transport-coefficient profile, chosen in the config file as
/// `constant:v` or `sine:mean,amp`.
#[derive(Clone, Debug, PartialEq)]
pub enum SigmaSpec {
    Constant(f64),
    Sine { mean: f64, amp: f64 },
}

impl SigmaSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |msg: &str| ChError::Config(format!("noise.sigma \"{text}\": {msg}"));
        let (kind, args) = text
            .split_once(':')
            .ok_or_else(|| bad("expected constant:v or sine:mean,amp"))?;
        match kind.trim() {
            "constant" => {
                let v = parse_float(args.trim(), "noise.sigma value")?;
                Ok(SigmaSpec::Constant(v))
            }
            "sine" => {
                let (m, a) = args
                    .split_once(',')
                    .ok_or_else(|| bad("sine takes mean,amp"))?;
                Ok(SigmaSpec::Sine {
                    mean: parse_float(m.trim(), "noise.sigma mean")?,
                    amp: parse_float(a.trim(), "noise.sigma amp")?,
                })
            }
            other => Err(bad(&format!("unknown shape \"{other}\""))),
        }
    }

    pub fn print(&self) -> String {
        match self {
            SigmaSpec::Constant(v) => format!("constant:{v}"),
            SigmaSpec::Sine { mean, amp } => format!("sine:{mean},{amp}"),
        }
    }

    /// Sample the profile on a grid.
    pub fn build(&self, grid: &Arc<PeriodicGrid>) -> Field {
        match *self {
            SigmaSpec::Constant(v) => constant_sigma(grid, v),
            SigmaSpec::Sine { mean, amp } => sine_sigma(grid, mean, amp),
        }
    }
}

// ──────────────────────────── Run configuration ──────────────────────────

/// Complete description of one experiment run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub grid_length: f64,
    pub grid_points: usize,
    pub c0: f64,
    pub k: f64,
    pub measure: IntensityMeasure,
    pub sigma: SigmaSpec,
    pub dt: f64,
    pub record_every: usize,
    /// Couplings, strictly decreasing; a trailing 0 row is allowed (the
    /// deterministic control).
    pub epsilons: Vec<f64>,
    pub alpha: f64,
    pub horizon: f64,
    pub n_paths: usize,
    pub base_seed: u64,
    pub out_dir: String,
}

fn parse_float(text: &str, what: &str) -> Result<f64> {
    text.parse::<f64>()
        .map_err(|_| ChError::Config(format!("{what}: \"{text}\" is not a number")))
}

fn parse_int<T: std::str::FromStr>(text: &str, what: &str) -> Result<T> {
    text.parse::<T>()
        .map_err(|_| ChError::Config(format!("{what}: \"{text}\" is not a valid integer")))
}

fn parse_atoms(text: &str) -> Result<IntensityMeasure> {
    let mut atoms = Vec::new();
    let trimmed = text.trim();
    if !trimmed.is_empty() && trimmed != "none" {
        for part in trimmed.split(',') {
            let (z, w) = part.split_once(':').ok_or_else(|| {
                ChError::Config(format!("noise.atoms entry \"{part}\": expected mark:weight"))
            })?;
            atoms.push((
                parse_float(z.trim(), "noise.atoms mark")?,
                parse_float(w.trim(), "noise.atoms weight")?,
            ));
        }
    }
    IntensityMeasure::new(atoms)
        .map_err(|e| ChError::Config(format!("noise.atoms \"{text}\": {e}")))
}

fn print_atoms(measure: &IntensityMeasure) -> String {
    if measure.atoms().is_empty() {
        return "none".into();
    }
    measure
        .atoms()
        .iter()
        .map(|(z, w)| format!("{z}:{w}"))
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Parse the flat `section.key = value` format. Every key is required
    /// except `output.dir` (default `out`); unknown or repeated keys are
    /// configuration errors, as is any invariant violation.
    pub fn parse(text: &str) -> Result<Self> {
        let mut seen: Vec<(String, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                ChError::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if seen.iter().any(|(k, _)| *k == key) {
                return Err(ChError::Config(format!("duplicate key \"{key}\"")));
            }
            seen.push((key, value));
        }
        let mut take = |key: &str| -> Option<String> {
            seen.iter()
                .position(|(k, _)| k == key)
                .map(|i| seen.remove(i).1)
        };
        let mut require = |key: &str| -> Result<String> {
            take(key).ok_or_else(|| ChError::Config(format!("missing key \"{key}\"")))
        };

        let config = RunConfig {
            grid_length: parse_float(&require("grid.L")?, "grid.L")?,
            grid_points: parse_int(&require("grid.N")?, "grid.N")?,
            c0: parse_float(&require("soliton.c0")?, "soliton.c0")?,
            k: parse_float(&require("soliton.k")?, "soliton.k")?,
            measure: parse_atoms(&require("noise.atoms")?)?,
            sigma: SigmaSpec::parse(&require("noise.sigma")?)?,
            dt: parse_float(&require("solver.dt")?, "solver.dt")?,
            record_every: parse_int(&require("solver.record_every")?, "solver.record_every")?,
            epsilons: {
                let text = require("experiment.epsilon")?;
                text.split(',')
                    .map(|p| parse_float(p.trim(), "experiment.epsilon entry"))
                    .collect::<Result<Vec<_>>>()?
            },
            alpha: parse_float(&require("experiment.alpha")?, "experiment.alpha")?,
            horizon: parse_float(&require("experiment.T")?, "experiment.T")?,
            n_paths: parse_int(&require("experiment.n_paths")?, "experiment.n_paths")?,
            base_seed: parse_int(&require("experiment.base_seed")?, "experiment.base_seed")?,
            out_dir: take("output.dir").unwrap_or_else(|| "out".into()),
        };
        if let Some((key, _)) = seen.first() {
            return Err(ChError::Config(format!("unknown key \"{key}\"")));
        }
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ChError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Canonical text form; `parse(print(c)) == c`.
    pub fn print(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "grid.L = {}", self.grid_length);
        let _ = writeln!(s, "grid.N = {}", self.grid_points);
        let _ = writeln!(s, "soliton.c0 = {}", self.c0);
        let _ = writeln!(s, "soliton.k = {}", self.k);
        let _ = writeln!(s, "noise.atoms = {}", print_atoms(&self.measure));
        let _ = writeln!(s, "noise.sigma = {}", self.sigma.print());
        let _ = writeln!(s, "solver.dt = {}", self.dt);
        let _ = writeln!(s, "solver.record_every = {}", self.record_every);
        let eps = self
            .epsilons
            .iter()
            .map(|e| format!("{e}"))
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(s, "experiment.epsilon = {eps}");
        let _ = writeln!(s, "experiment.alpha = {}", self.alpha);
        let _ = writeln!(s, "experiment.T = {}", self.horizon);
        let _ = writeln!(s, "experiment.n_paths = {}", self.n_paths);
        let _ = writeln!(s, "experiment.base_seed = {}", self.base_seed);
        let _ = writeln!(s, "output.dir = {}", self.out_dir);
        s
    }

    /// SHA-256 over the canonical text form minus the `output.dir` line,
    /// hex-encoded: the run identity embedded in every report. The output
    /// destination is excluded because re-running the same experiment into
    /// a different directory must keep its identity (and its reports
    /// byte-identical).
    pub fn config_hash(&self) -> String {
        let text: String = self
            .print()
            .lines()
            .filter(|line| !line.starts_with("output.dir"))
            .fold(String::new(), |mut acc, line| {
                acc.push_str(line);
                acc.push('\n');
                acc
            });
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().fold(String::new(), |mut acc, b| {
            let _ = write!(acc, "{b:02x}");
            acc
        })
    }

    pub fn validate(&self) -> Result<()> {
        PeriodicGrid::new(self.grid_length, self.grid_points)
            .map_err(|e| ChError::Config(format!("grid: {e}")))?;
        SolitonParams::new(self.c0, self.k)
            .map_err(|e| ChError::Config(format!("soliton: {e}")))?;
        self.solver_config()
            .validate()
            .map_err(|e| ChError::Config(format!("solver: {e}")))?;
        if self.epsilons.is_empty() {
            return Err(ChError::Config("experiment.epsilon must be non-empty".into()));
        }
        for &e in &self.epsilons {
            if !(e.is_finite() && e >= 0.0) {
                return Err(ChError::Config(format!(
                    "experiment.epsilon entries must be ≥ 0, got {e}"
                )));
            }
        }
        for pair in self.epsilons.windows(2) {
            if pair[1] >= pair[0] {
                return Err(ChError::Config(format!(
                    "experiment.epsilon must be strictly decreasing, got {} before {}",
                    pair[0], pair[1]
                )));
            }
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(ChError::Config(format!(
                "experiment.alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(ChError::Config(format!(
                "experiment.T must be positive, got {}",
                self.horizon
            )));
        }
        if self.n_paths == 0 {
            return Err(ChError::Config("experiment.n_paths must be ≥ 1".into()));
        }
        if self.out_dir.is_empty() {
            return Err(ChError::Config("output.dir must be non-empty".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Arc<PeriodicGrid>> {
        PeriodicGrid::new(self.grid_length, self.grid_points)
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            dt: self.dt,
            record_every: self.record_every,
            ..Default::default()
        }
    }
}

// ───────────────────────────────── Tests ─────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RunConfig {
        RunConfig {
            grid_length: 80.0,
            grid_points: 2048,
            c0: 3.0,
            k: 1.0,
            measure: IntensityMeasure::default_symmetric(),
            sigma: SigmaSpec::Sine {
                mean: 1.0,
                amp: 0.3,
            },
            dt: 1e-3,
            record_every: 10,
            epsilons: vec![0.08, 0.04, 0.02],
            alpha: 0.05,
            horizon: 2.0,
            n_paths: 200,
            base_seed: 0,
            out_dir: "out".into(),
        }
    }

    #[test]
    fn print_parse_round_trip() {
        let c = sample();
        let reparsed = RunConfig::parse(&c.print()).unwrap();
        assert_eq!(c, reparsed);
    }

    #[test]
    fn round_trip_survives_awkward_floats() {
        let mut c = sample();
        c.dt = 0.1 + 0.2 - 0.25; // not representable as a short decimal
        c.epsilons = vec![0.1 / 3.0, 0.01 / 7.0];
        c.sigma = SigmaSpec::Constant(2.0_f64.sqrt());
        let reparsed = RunConfig::parse(&c.print()).unwrap();
        assert_eq!(c, reparsed);
    }

    #[test]
    fn parse_accepts_comments_blanks_and_any_order() {
        let text = "\n# a comment\nexperiment.T = 2\ngrid.N = 2048\ngrid.L = 80 # inline\n\
                    soliton.c0 = 3\nsoliton.k = 1\nnoise.atoms = 0.5:1,-0.5:1\n\
                    noise.sigma = sine:1,0.3\nsolver.dt = 0.001\nsolver.record_every = 10\n\
                    experiment.epsilon = 0.08,0.04,0.02\nexperiment.alpha = 0.05\n\
                    experiment.n_paths = 200\nexperiment.base_seed = 0\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c, sample()); // output.dir defaulted
    }

    #[test]
    fn parse_rejects_bad_inputs() {
        let reject = |mutate: &dyn Fn(&mut RunConfig)| {
            let mut c = sample();
            mutate(&mut c);
            assert!(
                matches!(RunConfig::parse(&c.print()), Err(ChError::Config(_))),
                "accepted invalid config: {c:?}"
            );
        };
        reject(&|c| c.epsilons = vec![0.02, 0.04]); // increasing
        reject(&|c| c.epsilons = vec![0.04, 0.04]); // not strictly decreasing
        reject(&|c| c.epsilons.clear());
        reject(&|c| c.n_paths = 0);
        reject(&|c| c.alpha = 0.0);
        reject(&|c| c.horizon = -1.0);
        reject(&|c| c.c0 = 1.0); // c ≤ 2k: no soliton
        reject(&|c| c.grid_points = 100); // not a power of two

        for bad in [
            "grid.L = eighty",
            "unknown.key = 1",
            "grid.L 80",
            "grid.L = 80\ngrid.L = 80",
        ] {
            assert!(
                matches!(RunConfig::parse(bad), Err(ChError::Config(_))),
                "accepted: {bad}"
            );
        }
    }

    #[test]
    fn epsilon_zero_tail_is_allowed() {
        let mut c = sample();
        c.epsilons = vec![0.04, 0.02, 0.0];
        assert!(RunConfig::parse(&c.print()).is_ok());
    }

    #[test]
    fn sigma_spec_forms() {
        assert_eq!(
            SigmaSpec::parse("constant:1.5").unwrap(),
            SigmaSpec::Constant(1.5)
        );
        assert_eq!(
            SigmaSpec::parse("sine:1,0.3").unwrap(),
            SigmaSpec::Sine {
                mean: 1.0,
                amp: 0.3
            }
        );
        assert!(SigmaSpec::parse("square:1").is_err());
        assert!(SigmaSpec::parse("sine:1").is_err());
        let g = PeriodicGrid::new(40.0, 256).unwrap();
        let f = SigmaSpec::Sine {
            mean: 1.0,
            amp: 0.3,
        }
        .build(&g);
        assert!((f.values()[0] - 1.0).abs() < 0.3 + 1e-12);
    }

    #[test]
    fn hash_tracks_content() {
        let c = sample();
        let h = c.config_hash();
        assert_eq!(h.len(), 64);
        assert_eq!(h, sample().config_hash());
        let mut d = sample();
        d.base_seed = 1;
        assert_ne!(h, d.config_hash());
        // the destination is not part of the experiment's identity
        let mut e = sample();
        e.out_dir = "elsewhere".into();
        assert_eq!(h, e.config_hash());
    }

    #[test]
    fn empty_atoms_round_trip() {
        let mut c = sample();
        c.measure = IntensityMeasure::empty();
        let reparsed = RunConfig::parse(&c.print()).unwrap();
        assert_eq!(c, reparsed);
    }
}
