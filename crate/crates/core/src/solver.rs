//! Event-driven time integration of the full stochastic equation.
//!
//! Between jumps the state obeys the deterministic evolution
//!
//!   ∂_t u = −(u u_x + P_x) + ε m₁ σ u_x,   (1 − ∂_x²) P = u² + ½u_x² + 2k u,
//!
//! where the ε m₁ σ u_x term is the linear-in-L compensator part of the
//! Marcus integral against the compensated driver (m₁ = Σwᵢzᵢ; it vanishes
//! for symmetric measures). At each noise event (tⱼ, zⱼ) the full Marcus map
//! Φ(1, εzⱼ, ·) is applied. The stepper lands on every jump time exactly:
//! each inter-event interval is covered by equal substeps of at most `dt`,
//! integrated with the classical 4th-order scheme; nonlinear products are
//! de-aliased with the 2/3-rule so the state stays band-limited.
//!
//! A [`Trajectory`] records strided regular samples plus a pre/post pair at
//! every jump, which is exactly the information the energy-budget diagnostic
//! [`h1_evolution_residual`] needs: along the flow,
//! H₁(t) − H₁(0) = Σⱼ ΔH₁(tⱼ) − (ε m₁ / 2) ∫₀ᵗ (σ_x, u² − u_x²) ds.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{ChError, Result};
use crate::grid::{Field, PeriodicGrid};
use crate::noise::{marcus_map, IntensityMeasure, NoisePath};
use crate::operators::{hamiltonian_h1, pressure};

// ───────────────────────── Solver configuration ──────────────────────────

/// Time-stepping parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Maximum substep size (the actual substep divides each inter-event
    /// interval evenly and never exceeds this).
    pub dt: f64,
    /// A regular sample is recorded every `record_every` nominal steps,
    /// i.e. every `dt · record_every` time units.
    pub record_every: usize,
    /// Apply the 2/3-rule spectral mask to nonlinear products.
    pub dealias: bool,
    /// Abort with a CFL violation when max|u| · h / dx exceeds this.
    pub cfl_guard: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            record_every: 10,
            dealias: true,
            cfl_guard: 0.45,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(ChError::InvalidParams(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if self.record_every == 0 {
            return Err(ChError::InvalidParams(
                "record_every must be at least 1".into(),
            ));
        }
        if !(self.cfl_guard.is_finite() && self.cfl_guard > 0.0 && self.cfl_guard < 0.5) {
            return Err(ChError::InvalidParams(format!(
                "cfl_guard must lie in (0, 0.5), got {}",
                self.cfl_guard
            )));
        }
        Ok(())
    }
}

// ─────────────────────────── Trajectory types ────────────────────────────

/// What a recorded state represents.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SampleKind {
    /// Strided recording point (includes t = 0 and t = T).
    Regular,
    /// State immediately before the jump with mark `z`.
    PreJump { z: f64 },
    /// State immediately after the jump with mark `z`.
    PostJump { z: f64 },
}

impl SampleKind {
    /// Column label used in trajectory CSV bundles.
    pub fn label(&self) -> &'static str {
        match self {
            SampleKind::Regular => "regular",
            SampleKind::PreJump { .. } => "pre_jump",
            SampleKind::PostJump { .. } => "post_jump",
        }
    }

    /// The jump mark, zero for regular samples.
    pub fn mark(&self) -> f64 {
        match self {
            SampleKind::Regular => 0.0,
            SampleKind::PreJump { z } | SampleKind::PostJump { z } => *z,
        }
    }
}

/// One recorded state.
#[derive(Clone, Debug)]
pub struct Sample {
    pub t: f64,
    pub kind: SampleKind,
    pub state: Field,
}

/// A fully integrated path: time-ordered samples (pre- and post-jump states
/// share the jump time), the driving noise, and the run parameters.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub(crate) samples: Vec<Sample>,
    pub(crate) noise: NoisePath,
    pub(crate) epsilon: f64,
    pub(crate) config: SolverConfig,
}

impl Trajectory {
    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn noise(&self) -> &NoisePath {
        &self.noise
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    pub fn grid(&self) -> &Arc<PeriodicGrid> {
        self.samples[0].state.grid()
    }

    pub fn final_state(&self) -> &Field {
        &self.samples[self.samples.len() - 1].state
    }
}

// ──────────────────────────── Drift field ────────────────────────────────

/// Deterministic inter-jump drift −(u u_x + P_x) + ε m₁ σ u_x, assembled
/// from the shared operators (the stepper uses an equivalent fused spectral
/// pipeline; the two routes are cross-checked in the tests).
pub fn drift(u: &Field, eps: f64, sigma: &Field, measure: &IntensityMeasure, k: f64) -> Field {
    let ux = u.deriv(1);
    let advection = u.times(&ux).dealiased();
    let px = pressure(u, k).deriv(1);
    let mut d = advection.plus(&px).scaled(-1.0);
    let em1 = eps * measure.first_moment();
    if em1 != 0.0 {
        d.add_scaled_inplace(&sigma.times(&ux).dealiased(), em1);
    }
    d
}

// ─────────────────────── Fused right-hand side ───────────────────────────

/// Spectral pipeline for the inter-jump drift, minimizing transforms:
/// one forward FFT of u, one inverse for u_x, forward transforms of the two
/// nonlinear products, and one inverse for the assembled derivative.
struct DriftPipeline {
    grid: Arc<PeriodicGrid>,
    k: f64,
    dealias: bool,
    /// ε·m₁ multiplying the σ u_x transport term (0 for symmetric measures).
    transport_coeff: f64,
    sigma: Vec<f64>,
    /// i·ξ multipliers with the Nyquist bin zeroed (odd derivative).
    ik: Vec<Complex64>,
    /// 1/(1 + ξ²) Helmholtz symbols.
    helmholtz: Vec<f64>,
}

impl DriftPipeline {
    fn new(grid: &Arc<PeriodicGrid>, k: f64, eps: f64, sigma: &Field, m1: f64, dealias: bool) -> Self {
        let n = grid.n_points();
        let xi = grid.wavenumbers();
        let mut ik = vec![Complex64::new(0.0, 0.0); n];
        let mut helmholtz = vec![0.0; n];
        for m in 0..n {
            let z = if m == n / 2 { 0.0 } else { xi[m] };
            ik[m] = Complex64::new(0.0, z);
            helmholtz[m] = 1.0 / (1.0 + xi[m] * xi[m]);
        }
        Self {
            grid: Arc::clone(grid),
            k,
            dealias,
            transport_coeff: eps * m1,
            sigma: sigma.values().to_vec(),
            ik,
            helmholtz,
        }
    }

    fn mask(&self, spec: &mut [Complex64]) {
        if self.dealias {
            self.grid.dealias_spectrum(spec);
        }
    }

    /// Evaluate the drift at `u` (assumed band-limited when de-aliasing).
    fn eval(&self, u: &[f64]) -> Vec<f64> {
        let n = u.len();
        let spec = self.grid.fft(u);
        let mut ux_hat = spec.clone();
        for m in 0..n {
            ux_hat[m] *= self.ik[m];
        }
        let ux = self.grid.ifft_real(ux_hat);

        // advection u·u_x and the Helmholtz source u² + ½u_x² + 2k u
        let mut adv = vec![0.0; n];
        let mut src = vec![0.0; n];
        for i in 0..n {
            adv[i] = u[i] * ux[i];
            src[i] = u[i] * u[i] + 0.5 * ux[i] * ux[i] + 2.0 * self.k * u[i];
        }
        let mut adv_hat = self.grid.fft(&adv);
        self.mask(&mut adv_hat);
        let mut src_hat = self.grid.fft(&src);
        self.mask(&mut src_hat);

        // d̂ = −(advection)̂ − iξ/(1+ξ²)·(source)̂  (+ ε m₁ (σ u_x)̂ )
        let mut d_hat: Vec<Complex64> = (0..n)
            .map(|m| -adv_hat[m] - self.ik[m] * self.helmholtz[m] * src_hat[m])
            .collect();
        if self.transport_coeff != 0.0 {
            let prod: Vec<f64> = (0..n).map(|i| self.sigma[i] * ux[i]).collect();
            let mut prod_hat = self.grid.fft(&prod);
            self.mask(&mut prod_hat);
            for m in 0..n {
                d_hat[m] += self.transport_coeff * prod_hat[m];
            }
        }
        self.grid.ifft_real(d_hat)
    }

    /// One classical 4th-order substep of size `h`, in place.
    fn rk4_step(&self, u: &mut Vec<f64>, h: f64) {
        let n = u.len();
        let k1 = self.eval(u);
        let mut stage: Vec<f64> = (0..n).map(|i| u[i] + 0.5 * h * k1[i]).collect();
        let k2 = self.eval(&stage);
        for i in 0..n {
            stage[i] = u[i] + 0.5 * h * k2[i];
        }
        let k3 = self.eval(&stage);
        for i in 0..n {
            stage[i] = u[i] + h * k3[i];
        }
        let k4 = self.eval(&stage);
        for i in 0..n {
            u[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
}

// ───────────────────────── Event scheduling ──────────────────────────────

/// Two schedule times closer than this are merged into one point.
pub(crate) const SCHEDULE_MERGE_TOL: f64 = 1e-12;

pub(crate) struct SchedulePoint {
    pub(crate) t: f64,
    /// Jump marks firing at this time, in event order.
    pub(crate) marks: Vec<f64>,
    pub(crate) record: bool,
}

/// Recording times {0, Δ_rec, 2Δ_rec, …, T} merged with the jump times.
pub(crate) fn build_schedule(horizon: f64, config: &SolverConfig, events: &[(f64, f64)]) -> Vec<SchedulePoint> {
    let mut points: Vec<SchedulePoint> = Vec::new();
    for &(t, z) in events {
        match points.last_mut() {
            Some(p) if (p.t - t).abs() <= SCHEDULE_MERGE_TOL => p.marks.push(z),
            _ => points.push(SchedulePoint {
                t,
                marks: vec![z],
                record: false,
            }),
        }
    }
    let block = config.dt * config.record_every as f64;
    let mut rec_times: Vec<f64> = Vec::new();
    rec_times.push(0.0);
    let mut k = 1usize;
    loop {
        let t = k as f64 * block;
        if t >= horizon - SCHEDULE_MERGE_TOL {
            break;
        }
        rec_times.push(t);
        k += 1;
    }
    rec_times.push(horizon);

    for t in rec_times {
        match points
            .iter_mut()
            .find(|p| (p.t - t).abs() <= SCHEDULE_MERGE_TOL)
        {
            Some(p) => p.record = true,
            None => points.push(SchedulePoint {
                t,
                marks: Vec::new(),
                record: true,
            }),
        }
    }
    points.sort_by(|a, b| a.t.partial_cmp(&b.t).expect("finite schedule times"));
    points
}

// ───────────────────────────── Integrator ────────────────────────────────

/// Integrate the full equation from `u0` along the given noise path.
///
/// The jump measure is the one embedded in `noise` (the path knows what
/// produced it, so passing a second measure would only invite mismatch).
pub fn evolve(
    u0: &Field,
    noise: &NoisePath,
    eps: f64,
    sigma: &Field,
    k: f64,
    config: &SolverConfig,
) -> Result<Trajectory> {
    config.validate()?;
    if !(eps.is_finite() && eps >= 0.0) {
        return Err(ChError::InvalidParams(format!(
            "coupling ε must be ≥ 0, got {eps}"
        )));
    }
    if !u0.is_finite() {
        return Err(ChError::NonFinite("initial state is not finite".into()));
    }
    let grid = Arc::clone(u0.grid());
    assert!(
        grid.n_points() == sigma.grid().n_points() && grid.length() == sigma.grid().length(),
        "state and σ live on different grids"
    );

    let measure = noise.measure().clone();
    let pipeline = DriftPipeline::new(&grid, k, eps, sigma, measure.first_moment(), config.dealias);
    let schedule = build_schedule(noise.horizon(), config, noise.events());

    let initial = if config.dealias { u0.dealiased() } else { u0.clone() };
    let mut u = initial.values().to_vec();
    let mut t = 0.0;
    let mut samples = Vec::new();
    let dx = grid.dx();

    for point in &schedule {
        // march to the schedule point with equal substeps ≤ dt
        let delta = point.t - t;
        if delta > 0.0 {
            let n_sub = (delta / config.dt).ceil().max(1.0) as usize;
            let h = delta / n_sub as f64;
            for _ in 0..n_sub {
                if !u.iter().all(|v| v.is_finite()) {
                    return Err(ChError::NonFinite(format!(
                        "state lost finiteness at t ≈ {t:.6}"
                    )));
                }
                let vmax = u.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
                if vmax * h / dx > config.cfl_guard {
                    return Err(ChError::CflViolation(format!(
                        "max|u|·h/dx = {:.3} exceeds guard {:.3} at t ≈ {t:.6}",
                        vmax * h / dx,
                        config.cfl_guard
                    )));
                }
                pipeline.rk4_step(&mut u, h);
            }
            t = point.t;
        }

        if point.marks.is_empty() {
            if point.record {
                samples.push(Sample {
                    t: point.t,
                    kind: SampleKind::Regular,
                    state: Field::from_values(&grid, u.clone()),
                });
            }
        } else {
            for &z in &point.marks {
                let pre = Field::from_values(&grid, u.clone());
                samples.push(Sample {
                    t: point.t,
                    kind: SampleKind::PreJump { z },
                    state: pre.clone(),
                });
                let mut post = marcus_map(&pre, eps * z, sigma)?;
                if config.dealias {
                    post = post.dealiased();
                }
                u = post.values().to_vec();
                samples.push(Sample {
                    t: point.t,
                    kind: SampleKind::PostJump { z },
                    state: post,
                });
            }
        }
    }

    Ok(Trajectory {
        samples,
        noise: noise.clone(),
        epsilon: eps,
        config: config.clone(),
    })
}

// ───────────────────── Energy-budget diagnostic ──────────────────────────

/// Normalized defect of the H₁ evolution identity along a trajectory:
///
///   H₁(t) − H₁(0) − Σ_{tⱼ ≤ t} ΔH₁(tⱼ) + (ε m₁/2) ∫₀ᵗ (σ_x, u² − u_x²) ds
///
/// evaluated at every recorded sample (trapezoid rule for the integral,
/// which the pre/post jump pairs split into zero-width segments), divided
/// by |H₁(0)|. Small residuals certify that the inter-jump drift, the jump
/// maps, and the compensator bookkeeping are mutually consistent.
pub fn h1_evolution_residual(traj: &Trajectory, sigma: &Field) -> f64 {
    let samples = traj.samples();
    let m1 = traj.noise().measure().first_moment();
    let coeff = 0.5 * traj.epsilon() * m1;
    let sigma_x = sigma.deriv(1);

    let h1_0 = hamiltonian_h1(&samples[0].state);
    let mut jump_sum = 0.0;
    let mut integral = 0.0;
    let mut worst: f64 = 0.0;

    let source = |u: &Field| -> f64 {
        let ux = u.deriv(1);
        let quad = Field::from_values(
            u.grid(),
            u.values()
                .iter()
                .zip(ux.values())
                .map(|(&a, &b)| a * a - b * b)
                .collect::<Vec<_>>(),
        );
        sigma_x.inner(&quad)
    };

    let mut prev_t = samples[0].t;
    let mut prev_g = source(&samples[0].state);
    let mut prev_h1 = h1_0;
    let mut prev_kind = samples[0].kind;

    for s in &samples[1..] {
        let h1 = hamiltonian_h1(&s.state);
        let g = source(&s.state);
        integral += 0.5 * (s.t - prev_t) * (g + prev_g);
        if let (SampleKind::PreJump { .. }, SampleKind::PostJump { .. }) = (prev_kind, s.kind) {
            jump_sum += h1 - prev_h1;
        }
        let defect = h1 - h1_0 - jump_sum + coeff * integral;
        worst = worst.max(defect.abs());
        prev_t = s.t;
        prev_g = g;
        prev_h1 = h1;
        prev_kind = s.kind;
    }
    worst / h1_0.abs()
}

// ─────────────────────────── Peak tracking ───────────────────────────────

/// Position of the state's maximum, refined by a parabola through the
/// maximal node and its neighbours.
pub fn peak_position(u: &Field) -> f64 {
    let vals = u.values();
    let n = vals.len();
    let j = u.argmax();
    let (a, b, c) = (vals[(j + n - 1) % n], vals[j], vals[(j + 1) % n]);
    let denom = a - 2.0 * b + c;
    let offset = if denom.abs() < 1e-300 {
        0.0
    } else {
        0.5 * (a - c) / denom
    };
    u.grid().nodes()[j] + offset * u.grid().dx()
}

/// Least-squares speed of the peak across the trajectory's regular samples,
/// with periodic unwrapping. Returns None with fewer than two samples.
pub fn fitted_speed(traj: &Trajectory) -> Option<f64> {
    let l = traj.grid().length();
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for s in traj.samples() {
        if let SampleKind::Regular = s.kind {
            let raw = peak_position(&s.state);
            let x = match pts.last() {
                Some(&(_, prev)) => raw + l * ((prev - raw) / l).round(),
                None => raw,
            };
            pts.push((s.t, x));
        }
    }
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let (st, sx): (f64, f64) = pts.iter().fold((0.0, 0.0), |(a, b), &(t, x)| (a + t, b + x));
    let (tm, xm) = (st / n, sx / n);
    let (num, den) = pts.iter().fold((0.0, 0.0), |(nu, de), &(t, x)| {
        (nu + (t - tm) * (x - xm), de + (t - tm) * (t - tm))
    });
    Some(num / den)
}

// ───────────────────────── Trajectory bundles ────────────────────────────

/// Serialize a trajectory to `<dir>/trajectory.csv` (columns t, kind, z,
/// then every `stride`-th grid value) plus `<dir>/manifest.json` recording
/// the solver configuration, seed, coupling, grid, and stride.
pub fn write_bundle(traj: &Trajectory, stride: usize, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    write_bundle_kind(traj, stride, dir, "full")
}

/// Shared bundle writer; `kind` marks the manifest as a full-equation or
/// limit-equation trajectory.
pub(crate) fn write_bundle_kind(
    traj: &Trajectory,
    stride: usize,
    dir: &Path,
    kind: &str,
) -> Result<(PathBuf, PathBuf)> {
    if stride == 0 {
        return Err(ChError::InvalidParams("stride must be at least 1".into()));
    }
    std::fs::create_dir_all(dir)?;
    let csv_path = dir.join("trajectory.csv");
    let manifest_path = dir.join("manifest.json");

    let n = traj.grid().n_points();
    let mut wtr = csv::Writer::from_path(&csv_path)?;
    let mut header = vec!["t".to_string(), "kind".to_string(), "z".to_string()];
    header.extend((0..n).step_by(stride).map(|i| format!("u_{i:04}")));
    wtr.write_record(&header)?;
    for s in traj.samples() {
        let mut row = vec![
            format!("{:.12e}", s.t),
            s.kind.label().to_string(),
            format!("{:.12e}", s.kind.mark()),
        ];
        row.extend(
            s.state
                .values()
                .iter()
                .step_by(stride)
                .map(|v| format!("{v:.12e}")),
        );
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(std::io::Error::from)?;

    let manifest = serde_json::json!({
        "kind": kind,
        "config": traj.config(),
        "seed": traj.noise().seed(),
        "epsilon": traj.epsilon(),
        "grid": { "length": traj.grid().length(), "n": n },
        "stride": stride,
    });
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok((csv_path, manifest_path))
}

// ───────────────────────────────── Tests ─────────────────────────────────
