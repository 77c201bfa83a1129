//! Small-coupling limit of the soliton remainder.
//!
//! As the coupling ε → 0 the co-moving remainder η^ε = (u(·+x^ε) − φ_{c^ε})/ε
//! converges (pathwise, on coupled noise) to the solution of the linear
//! jump equation
//!
//!   dη = [½(1−∂x²)⁻¹∂x L₀ η + y(η) ∂xφ₀ − a(η) ∂cφ₀] dt + h(t) ◇ dL,
//!   η(0) = 0,
//!
//! where L₀ is the linearized operator at the base soliton φ₀ = φ_{c₀},
//! y(η) = (η, w_y) and a(η) = (η, w_a) are single pairings against fixed
//! adjoint weights, and the jump field
//!
//!   h(t) = σ_t ∂xφ₀ + μ(t) ∂xφ₀ − b(t) ∂cφ₀,   σ_t = σ(· + c₀ t),
//!
//! is the projection of σ_t∂xφ₀ orthogonal to T₁, T₂ — the coefficients
//! μ(t) = −p⁻¹(σ_t∂xφ₀, T₁) and b(t) = q⁻¹(σ_t∂xφ₀, T₂) are the ε → 0
//! limits of the tracked modulation coefficients, carried along the
//! deterministic frame x⁰(t) = c₀t. A mark z at time t contributes the
//! state-independent jump Δη = −z·h(t), and the compensation of the driver
//! adds the matching drift +m₁·h(t) between jumps.
//!
//! Constant σ degenerates completely: μ ≡ −σ, b ≡ 0, h ≡ 0, and η ≡ 0 — in
//! the full equation those jumps are pure translations absorbed by x^ε.

use std::path::{Path, PathBuf};

use crate::error::{ChError, Result};
use crate::grid::{Field, PeriodicGrid};
use crate::modulation::{ModulationTrack, SolitonFamily};
use crate::noise::NoisePath;
use crate::operators::LinearizedOperator;
use crate::solver::{
    build_schedule, write_bundle_kind, Sample, SampleKind, SolverConfig, Trajectory,
    SCHEDULE_MERGE_TOL,
};
use std::sync::Arc;

// ───────────────────────── Limit coefficients ────────────────────────────

/// Everything needed to drive the limit remainder equation: the frozen
/// linearized operator, the pairing weights that turn y(η), a(η) into single
/// inner products, the orthogonality weights T₁, T₂, and σ.
pub struct LimitCoefficients {
    grid: Arc<PeriodicGrid>,
    c0: f64,
    sigma: Field,
    phi0_x: Field,
    dphi_dc0: Field,
    t1: Field,
    t2: Field,
    p: f64,
    q: f64,
    l0: LinearizedOperator,
    w_y: Field,
    w_a: Field,
    mu0: f64,
    b0: f64,
}

/// Build the limit system at a soliton family's base point.
///
/// The adjoint weights come from pairing the drift against T₁, T₂ and
/// moving L₀ across the inner product (it is self-adjoint, and
/// (1−∂x²)⁻¹T₁ = ∂xφ₀, (1−∂x²)⁻¹T₂ = φ₀ exactly):
///
///   y(η) = +½p⁻¹ (η, L₀ ∂x²φ₀),   a(η) = −½q⁻¹ (η, L₀ ∂xφ₀),
///
/// the second of which is tiny because ∂xφ₀ is the translation zero mode
/// of L₀.
pub fn limit_coeffs(family: &SolitonFamily, sigma: &Field) -> Result<LimitCoefficients> {
    let grid = Arc::clone(family.grid());
    assert!(
        sigma.grid().n_points() == grid.n_points() && sigma.grid().length() == grid.length(),
        "σ and family live on different grids"
    );
    let base = family.base();
    // keep every field of the limit dynamics in the dealiased band, and pair
    // p, q against the same band-limited directions: this makes h(t) vanish
    // to rounding for constant σ (instead of at the profile's spectral tail)
    let phi0_x = base.dphi_dx().dealiased();
    let dphi_dc0 = base.dphi_dc().dealiased();
    let t1 = family.t1().clone();
    let t2 = family.t2().clone();
    let p = phi0_x.inner(&t1);
    let q = dphi_dc0.inner(&t2);
    let l0 = LinearizedOperator::new(family.c0(), base.phi(), family.k());
    let w_y = l0.apply(&phi0_x.deriv(1)).scaled(0.5 / p);
    let w_a = l0.apply(&phi0_x).scaled(-0.5 / q);
    let mut coeffs = LimitCoefficients {
        grid,
        c0: family.c0(),
        sigma: sigma.clone(),
        phi0_x,
        dphi_dc0,
        t1,
        t2,
        p,
        q,
        l0,
        w_y,
        w_a,
        mu0: 0.0,
        b0: 0.0,
    };
    let (mu0, b0) = coeffs.mu_b_at(0.0);
    coeffs.mu0 = mu0;
    coeffs.b0 = b0;
    Ok(coeffs)
}

impl LimitCoefficients {
    pub fn grid(&self) -> &Arc<PeriodicGrid> {
        &self.grid
    }

    pub fn c0(&self) -> f64 {
        self.c0
    }

    /// μ at t = 0 (the co-moving frame sits at the origin); for constant σ
    /// this is −σ exactly and stays constant in t.
    pub fn mu0(&self) -> f64 {
        self.mu0
    }

    /// b at t = 0; zero for constant σ by parity.
    pub fn b0(&self) -> f64 {
        self.b0
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    /// Pairing weight of y(η).
    pub fn w_y(&self) -> &Field {
        &self.w_y
    }

    /// Pairing weight of a(η) (≈ 0: zero-mode direction).
    pub fn w_a(&self) -> &Field {
        &self.w_a
    }

    pub fn y_of(&self, eta: &Field) -> f64 {
        eta.inner(&self.w_y)
    }

    pub fn a_of(&self, eta: &Field) -> f64 {
        eta.inner(&self.w_a)
    }

    /// Limit modulation coefficients (μ(t), b(t)) in the frame x⁰(t) = c₀t.
    pub fn mu_b_at(&self, t: f64) -> (f64, f64) {
        let s = self.transported_gradient(t);
        (-s.inner(&self.t1) / self.p, s.inner(&self.t2) / self.q)
    }

    /// Jump field h(t) = σ_t∂xφ₀ + μ(t)∂xφ₀ − b(t)∂cφ₀ together with
    /// (μ(t), b(t)); h is orthogonal to T₁ and T₂ by construction.
    pub fn forcing_at(&self, t: f64) -> (Field, f64, f64) {
        let s = self.transported_gradient(t);
        let mu = -s.inner(&self.t1) / self.p;
        let b = s.inner(&self.t2) / self.q;
        let mut h = s;
        h.add_scaled_inplace(&self.phi0_x, mu);
        h.add_scaled_inplace(&self.dphi_dc0, -b);
        (h, mu, b)
    }

    /// σ_t ∂xφ₀ (dealiased product), σ_t = σ(· + c₀t).
    fn transported_gradient(&self, t: f64) -> Field {
        let sigma_t = self.sigma.shifted(-self.c0 * t);
        sigma_t.times(&self.phi0_x).dealiased()
    }

    /// Inter-jump drift at state η and time t: the m₁-compensation term is
    /// the caller's because it carries the mark scaling.
    fn drift(&self, eta: &Field, compensation: Option<(&Field, f64)>) -> Field {
        let mut d = self.l0.apply(eta).deriv(1).helmholtz_inv().scaled(0.5);
        d.add_scaled_inplace(&self.phi0_x, self.y_of(eta));
        d.add_scaled_inplace(&self.dphi_dc0, -self.a_of(eta));
        if let Some((h, m1)) = compensation {
            d.add_scaled_inplace(h, m1);
        }
        d
    }
}

// ───────────────────────── Limit time stepping ───────────────────────────

/// Integrate the limit remainder equation along a noise path, with the same
/// schedule, recording, and pre/post jump sampling as the full solver.
///
/// `eps_scale` scales every mark and the compensation moment m₁ jointly
/// (the equation is linear, so η scales with it exactly); production runs
/// use 1. There is no CFL constraint — the stiff part is linear and the RK4
/// step is held at the configured dt — only a finiteness guard.
pub fn evolve_eta(
    noise: &NoisePath,
    eps_scale: f64,
    limit: &LimitCoefficients,
    config: &SolverConfig,
) -> Result<Trajectory> {
    config.validate()?;
    if !(eps_scale.is_finite() && eps_scale >= 0.0) {
        return Err(ChError::InvalidParams(format!(
            "mark scale must be ≥ 0, got {eps_scale}"
        )));
    }
    let grid = Arc::clone(limit.grid());
    let m1_eff = eps_scale * noise.measure().first_moment();
    let schedule = build_schedule(noise.horizon(), config, noise.events());

    let mut eta = Field::zeros(&grid);
    let mut t = 0.0;
    let mut samples = Vec::new();

    for point in &schedule {
        let delta = point.t - t;
        if delta > 0.0 {
            let n_sub = (delta / config.dt).ceil().max(1.0) as usize;
            let h_step = delta / n_sub as f64;
            for i in 0..n_sub {
                if !eta.is_finite() {
                    return Err(ChError::NonFinite(format!(
                        "limit remainder lost finiteness at t ≈ {t:.6}"
                    )));
                }
                let t_sub = t + i as f64 * h_step;
                // compensation fields at the three RK4 stage times
                let stage_h = if m1_eff != 0.0 {
                    Some((
                        limit.forcing_at(t_sub).0,
                        limit.forcing_at(t_sub + 0.5 * h_step).0,
                        limit.forcing_at(t_sub + h_step).0,
                    ))
                } else {
                    None
                };
                let comp = |which: usize| -> Option<(&Field, f64)> {
                    stage_h
                        .as_ref()
                        .map(|(b, m, e)| (match which {
                            0 => b,
                            1 => m,
                            _ => e,
                        }, m1_eff))
                };
                let k1 = limit.drift(&eta, comp(0));
                let k2 = limit.drift(&eta.add_scaled(&k1, 0.5 * h_step), comp(1));
                let k3 = limit.drift(&eta.add_scaled(&k2, 0.5 * h_step), comp(1));
                let k4 = limit.drift(&eta.add_scaled(&k3, h_step), comp(2));
                eta.add_scaled_inplace(&k1, h_step / 6.0);
                eta.add_scaled_inplace(&k2, h_step / 3.0);
                eta.add_scaled_inplace(&k3, h_step / 3.0);
                eta.add_scaled_inplace(&k4, h_step / 6.0);
            }
            t = point.t;
        }

        if point.marks.is_empty() {
            if point.record {
                samples.push(Sample {
                    t: point.t,
                    kind: SampleKind::Regular,
                    state: eta.clone(),
                });
            }
        } else {
            let (h_field, _, _) = limit.forcing_at(point.t);
            for &z in &point.marks {
                samples.push(Sample {
                    t: point.t,
                    kind: SampleKind::PreJump { z },
                    state: eta.clone(),
                });
                eta.add_scaled_inplace(&h_field, -(eps_scale * z));
                samples.push(Sample {
                    t: point.t,
                    kind: SampleKind::PostJump { z },
                    state: eta.clone(),
                });
            }
        }
    }

    if !eta.is_finite() {
        return Err(ChError::NonFinite(
            "limit remainder lost finiteness at the horizon".into(),
        ));
    }
    Ok(Trajectory {
        samples,
        noise: noise.clone(),
        epsilon: eps_scale,
        config: config.clone(),
    })
}

// ─────────────────────────── Diagnostics ─────────────────────────────────

/// Worst normalized violation of the orthogonality constraints along a
/// limit trajectory: max over recorded times and i ∈ {1, 2} of
/// |(η(t), T_i)| / (sup_t ‖η‖_{L²} · ‖T_i‖_{L²}). Zero for the zero path.
///
/// The coefficient construction makes every stage derivative and every jump
/// orthogonal to T₁, T₂ up to rounding, so this sits at the floating-point
/// floor independent of dt.
pub fn orthogonality_drift(traj: &Trajectory, limit: &LimitCoefficients) -> f64 {
    let sup_eta = traj
        .samples()
        .iter()
        .map(|s| s.state.l2_norm())
        .fold(0.0_f64, f64::max);
    if sup_eta == 0.0 {
        return 0.0;
    }
    let scale1 = sup_eta * limit.t1.l2_norm();
    let scale2 = sup_eta * limit.t2.l2_norm();
    let mut worst = 0.0_f64;
    for s in traj.samples() {
        worst = worst.max(s.state.inner(&limit.t1).abs() / scale1);
        worst = worst.max(s.state.inner(&limit.t2).abs() / scale2);
    }
    worst
}

/// Coupled comparison sup_{t ≤ t_max ∧ exit} ‖η^ε(t) − η(t)‖_{L²} between a
/// modulation track of the full equation and a limit trajectory driven by
/// the same noise path. Rows are matched one-to-one in schedule order; the
/// track may be shorter (tube exit truncates it).
pub fn compare_remainder(track: &ModulationTrack, eta_traj: &Trajectory, t_max: f64) -> f64 {
    let mut sup = 0.0_f64;
    for (p, s) in track.points().iter().zip(eta_traj.samples()) {
        assert!(
            (p.t - s.t).abs() <= SCHEDULE_MERGE_TOL && p.kind.label() == s.kind.label(),
            "track and limit trajectory disagree on the schedule at t = {}",
            p.t
        );
        if p.t > t_max + SCHEDULE_MERGE_TOL {
            break;
        }
        sup = sup.max(p.eta.minus(&s.state).l2_norm());
    }
    sup
}

/// Persist a limit trajectory in the common bundle format, flagged
/// `"kind": "limit"` in the manifest.
pub fn write_limit_bundle(
    traj: &Trajectory,
    stride: usize,
    dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    write_bundle_kind(traj, stride, dir, "limit")
}

// ───────────────────────────────── Tests ─────────────────────────────────
