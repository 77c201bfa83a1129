//! Compound-Poisson driver and Marcus jump maps.
//!
//! The stochastic forcing is a compensated pure-jump Lévy process
//! L(t) = ∫∫ z Ñ(ds,dz) whose intensity measure ϑ is a finite sum of atoms
//! (zᵢ, wᵢ) with marks |zᵢ| ≤ 1 — a compound Poisson process of total rate
//! λ = Σwᵢ, so every path has finitely many jumps and can be integrated
//! event by event.
//!
//! A jump with mark z acts on the state through the Marcus map Φ(1, εz, ·):
//! the time-1 flow of the transport equation ∂_s y + εz σ(x) ∂_x y = 0.
//! Concretely, each grid node x is traced backward along the characteristic
//! dX/dτ = −εz σ(X) for unit time and the state is evaluated at the foot by
//! trigonometric interpolation. For constant σ the flow is an exact
//! translation by εzσ, computed spectrally.
//!
//! Because L is compensated, expanding its jump integral leaves the
//! deterministic Marcus correction ∫[Φ(1,εz,u) − u + εzσu_x]ϑ(dz)
//! ([`compensator_drift`]), an O(ε²) field used as a diagnostic, and the
//! exit-rate budget b(ε) ([`b_of_eps`]).

use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{ChError, Result};
use crate::grid::{Field, PeriodicGrid};

// ───────────────────────── Intensity measure ─────────────────────────────

/// Finite discrete intensity measure: atoms (mark zᵢ, rate weight wᵢ).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IntensityMeasure {
    atoms: Vec<(f64, f64)>,
}

impl IntensityMeasure {
    /// Validate 0 < |zᵢ| ≤ 1 and wᵢ > 0. An empty atom list is a valid
    /// measure (a driver that never jumps).
    pub fn new(atoms: Vec<(f64, f64)>) -> Result<Self> {
        for &(z, w) in &atoms {
            if !(z.is_finite() && z != 0.0 && z.abs() <= 1.0) {
                return Err(ChError::InvalidParams(format!(
                    "mark must satisfy 0 < |z| ≤ 1, got {z}"
                )));
            }
            if !(w.is_finite() && w > 0.0) {
                return Err(ChError::InvalidParams(format!(
                    "rate weight must be positive, got {w}"
                )));
            }
        }
        Ok(Self { atoms })
    }

    /// Measure with no atoms: zero rate, no events.
    pub fn empty() -> Self {
        Self { atoms: Vec::new() }
    }

    /// The default experiment measure: {(+0.5, 1.0), (−0.5, 1.0)}, rate 2,
    /// symmetric (first moment zero).
    pub fn default_symmetric() -> Self {
        Self {
            atoms: vec![(0.5, 1.0), (-0.5, 1.0)],
        }
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    /// Total jump rate λ = Σwᵢ.
    pub fn total_rate(&self) -> f64 {
        self.atoms.iter().map(|&(_, w)| w).sum()
    }

    /// First moment m₁ = Σwᵢzᵢ (zero for symmetric measures).
    pub fn first_moment(&self) -> f64 {
        self.atoms.iter().map(|&(z, w)| w * z).sum()
    }

    /// Second moment m₂ = Σwᵢzᵢ².
    pub fn second_moment(&self) -> f64 {
        self.atoms.iter().map(|&(z, w)| w * z * z).sum()
    }

    /// Does z coincide with one of the atoms' marks?
    fn contains_mark(&self, z: f64) -> bool {
        self.atoms.iter().any(|&(a, _)| a == z)
    }
}

// ─────────────────────────── Noise paths ─────────────────────────────────

/// One realization of the driver: time-sorted events (tⱼ, zⱼ) on (0, T],
/// along with the measure and seed that produced it, so a path can be
/// replayed bit-identically or serialized for later replay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisePath {
    #[serde(rename = "T")]
    horizon: f64,
    seed: u64,
    #[serde(rename = "atoms")]
    measure: IntensityMeasure,
    events: Vec<(f64, f64)>,
}

impl NoisePath {
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn measure(&self) -> &IntensityMeasure {
        &self.measure
    }

    /// Events as (time, mark) pairs, strictly increasing in time.
    pub fn events(&self) -> &[(f64, f64)] {
        &self.events
    }

    /// Serialize to the replay-file JSON format (T, seed, atoms, events).
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parse a replay file and re-validate every path invariant.
    pub fn from_json(text: &str) -> Result<Self> {
        let path: NoisePath = serde_json::from_str(text)?;
        path.validate()?;
        Ok(path)
    }

    fn validate(&self) -> Result<()> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(ChError::InvalidParams(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        // re-run atom validation (serde bypasses the constructor)
        IntensityMeasure::new(self.measure.atoms.clone())?;
        let mut prev = 0.0;
        for &(t, z) in &self.events {
            if !(t > prev && t <= self.horizon) {
                return Err(ChError::InvalidParams(format!(
                    "event times must be strictly increasing in (0, T], got {t} after {prev}"
                )));
            }
            if !self.measure.contains_mark(z) {
                return Err(ChError::InvalidParams(format!(
                    "event mark {z} is not an atom of the measure"
                )));
            }
            prev = t;
        }
        Ok(())
    }
}

/// Sample a driver path on [0, T]: Poisson(λ) event times, marks drawn from
/// the atoms with probabilities wᵢ/λ. Deterministic given the seed.
pub fn sample_path(measure: &IntensityMeasure, horizon: f64, seed: u64) -> Result<NoisePath> {
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(ChError::InvalidParams(format!(
            "horizon must be positive, got {horizon}"
        )));
    }
    let lambda = measure.total_rate();
    let mut events = Vec::new();
    if lambda > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let exp = Exp::new(lambda).expect("positive rate");
        let mut t = 0.0;
        loop {
            t += exp.sample(&mut rng);
            if t > horizon {
                break;
            }
            let mut draw = rng.random::<f64>() * lambda;
            let mut mark = measure.atoms[measure.atoms.len() - 1].0;
            for &(z, w) in &measure.atoms {
                if draw < w {
                    mark = z;
                    break;
                }
                draw -= w;
            }
            events.push((t, mark));
        }
    }
    Ok(NoisePath {
        horizon,
        seed,
        measure: measure.clone(),
        events,
    })
}

// ─────────────────────────── Marcus map ──────────────────────────────────

/// Relative deviation below which σ is treated as spatially constant.
const CONST_SIGMA_TOL: f64 = 1e-13;

/// Substeps of the classical 4th-order integrator tracing one unit of
/// characteristic flow time.
const FLOW_SUBSTEPS: usize = 8;

/// Spectral evaluator for a smooth field at off-grid points: keeps only the
/// modes carrying mass, so σ with a couple of harmonics costs O(1) per point.
struct TrigSeries {
    length: f64,
    n: usize,
    /// Position of the first grid node (the FFT's index origin).
    x0: f64,
    /// (mode index m ∈ [1, N/2], coefficient) — positive-frequency half.
    modes: Vec<(usize, Complex64)>,
    mean: f64,
}

impl TrigSeries {
    fn new(f: &Field, drop_below: f64) -> Self {
        let g = f.grid();
        let spec = g.fft(f.values());
        let n = g.n_points();
        let x0 = g.nodes()[0];
        let cutoff = drop_below
            * spec
                .iter()
                .fold(0.0_f64, |m, c| m.max(c.norm()))
                .max(f64::MIN_POSITIVE);
        let mut modes = Vec::new();
        for (m, c) in spec.iter().enumerate().take(n / 2 + 1).skip(1) {
            if c.norm() > cutoff {
                modes.push((m, *c));
            }
        }
        Self {
            length: g.length(),
            n,
            x0,
            modes,
            mean: spec[0].re / n as f64,
        }
    }

    /// f(x) = mean + (2/N)·Σ Re(ĉ_m e^{iξ_m (x−x₀)})  (Nyquist counted once).
    fn eval(&self, x: f64) -> f64 {
        let base = 2.0 * std::f64::consts::PI * (x - self.x0) / self.length;
        let mut acc = 0.0;
        for &(m, c) in &self.modes {
            let phase = Complex64::from_polar(1.0, base * m as f64);
            let weight = if m == self.n / 2 { 1.0 } else { 2.0 };
            acc += weight * (c * phase).re;
        }
        self.mean + acc / self.n as f64
    }
}

/// Evaluate a field at many off-grid points via the full trigonometric
/// interpolant, using a running-phase recurrence per point.
fn interpolate_at(f: &Field, points: &[f64]) -> Vec<f64> {
    let g = f.grid();
    let n = g.n_points();
    let spec = g.fft(f.values());
    // highest mode actually carrying mass (dealiased fields stop at ⌊N/3⌋)
    let cutoff = 1e-300;
    let mut m_max = 0;
    for m in 1..=n / 2 {
        if spec[m].norm() > cutoff {
            m_max = m;
        }
    }
    let base = 2.0 * std::f64::consts::PI / g.length();
    let x0 = g.nodes()[0];
    points
        .iter()
        .map(|&x| {
            let omega = Complex64::from_polar(1.0, base * (x - x0));
            let mut power = Complex64::new(1.0, 0.0);
            let mut acc = 0.5 * spec[0].re;
            for m in 1..=m_max {
                power *= omega;
                let weight = if m == n / 2 { 0.5 } else { 1.0 };
                acc += weight * (spec[m] * power).re;
            }
            2.0 * acc / n as f64
        })
        .collect()
}

/// Marcus jump map Φ(1, a, ·) with a = εz: the time-1 flow of
/// ∂_s y + a σ(x) ∂_x y = 0 applied to `u`.
///
/// Constant σ ⇒ exact spectral translation by a·σ. Variable σ ⇒ backward
/// characteristic tracing with a classical 4th-order integrator and
/// trigonometric interpolation at the feet.
///
/// # Panics
/// If `u` and `sigma` live on different grids (programming error).
pub fn marcus_map(u: &Field, amplitude: f64, sigma: &Field) -> Result<Field> {
    let g = Arc::clone(u.grid());
    assert!(
        std::ptr::eq(g.as_ref(), sigma.grid().as_ref())
            || (g.n_points() == sigma.grid().n_points() && g.length() == sigma.grid().length()),
        "state and σ live on different grids"
    );
    if amplitude == 0.0 {
        return Ok(u.clone());
    }
    let sigma_max = sigma.max_abs();
    if amplitude.abs() * sigma_max > 0.25 * g.length() {
        return Err(ChError::JumpTooLarge(format!(
            "|εz|·max|σ| = {:.3e} exceeds L/4 = {:.3e}; jump too large for domain",
            amplitude.abs() * sigma_max,
            0.25 * g.length()
        )));
    }

    // constant-σ fast path: the flow is an exact translation
    let mean = sigma.values().iter().sum::<f64>() / sigma.len() as f64;
    let deviation = sigma
        .values()
        .iter()
        .fold(0.0_f64, |m, &v| m.max((v - mean).abs()));
    if deviation <= CONST_SIGMA_TOL * (1.0 + mean.abs()) {
        return Ok(u.shifted(amplitude * mean));
    }

    // backward characteristics: dX/dτ = −aσ(X), τ ∈ [0,1], X(0) = node
    let series = TrigSeries::new(sigma, 1e-15);
    let h = 1.0 / FLOW_SUBSTEPS as f64;
    let feet: Vec<f64> = g
        .nodes()
        .iter()
        .map(|&x0| {
            let mut x = x0;
            for _ in 0..FLOW_SUBSTEPS {
                let k1 = -amplitude * series.eval(x);
                let k2 = -amplitude * series.eval(x + 0.5 * h * k1);
                let k3 = -amplitude * series.eval(x + 0.5 * h * k2);
                let k4 = -amplitude * series.eval(x + h * k3);
                x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
            x
        })
        .collect();
    Ok(Field::from_values(&g, interpolate_at(u, &feet)))
}

// ──────────────────────── Compensator drift ──────────────────────────────

/// The Marcus compensator field ∫[Φ(1, εz, u) − u + εzσu_x]ϑ(dz), assembled
/// as the atom sum Σwᵢ[marcus_map(u, εzᵢ, σ) − u + εzᵢ σ u_x].
///
/// Each bracket is an O(ε²) Taylor remainder; the whole field measures how
/// far the jump maps deviate from their linearization.
pub fn compensator_drift(
    u: &Field,
    eps: f64,
    sigma: &Field,
    measure: &IntensityMeasure,
) -> Result<Field> {
    let mut total = Field::zeros(u.grid());
    if eps == 0.0 || measure.atoms().is_empty() {
        return Ok(total);
    }
    let transport = sigma.times(&u.deriv(1));
    for &(z, w) in measure.atoms() {
        let mapped = marcus_map(u, eps * z, sigma)?;
        let bracket = mapped.minus(u).add_scaled(&transport, eps * z);
        total.add_scaled_inplace(&bracket, w);
    }
    Ok(total)
}

/// Exit-rate budget b(ε) = Σwᵢ[(e^{ε|zᵢ|s} − 1)² + (e^{(3/2)ε|zᵢ|s} − 1)²]
/// with s = ‖σ_x‖_{L∞}. Behaves like (13/4)s²m₂·ε² as ε → 0.
pub fn b_of_eps(eps: f64, sigma: &Field, measure: &IntensityMeasure) -> f64 {
    let s = sigma.deriv(1).max_abs();
    measure
        .atoms()
        .iter()
        .map(|&(z, w)| {
            let a = eps * z.abs() * s;
            let e1 = a.exp_m1();
            let e2 = (1.5 * a).exp_m1();
            w * (e1 * e1 + e2 * e2)
        })
        .sum()
}

// ─────────────────────────── σ constructors ──────────────────────────────

/// Spatially constant transport coefficient σ ≡ value.
pub fn constant_sigma(grid: &Arc<PeriodicGrid>, value: f64) -> Field {
    Field::constant(grid, value)
}

/// The default variable coefficient σ(x) = mean + amp·sin(2πx/L).
pub fn sine_sigma(grid: &Arc<PeriodicGrid>, mean: f64, amp: f64) -> Field {
    let l = grid.length();
    Field::from_fn(grid, move |x| {
        mean + amp * (2.0 * std::f64::consts::PI * x / l).sin()
    })
}

// ───────────────────────────────── Tests ─────────────────────────────────
