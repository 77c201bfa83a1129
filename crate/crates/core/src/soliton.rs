//! Smooth solitary-wave profiles of the Camassa–Holm equation.
//!
//! For dispersion k > 0 and speed c > 2k the equation possesses a smooth,
//! positive, even solitary wave φ_c of peak height c − 2k, known in closed
//! parametric form. With β = √(1 − 2k/c) and θ₀ = tanh⁻¹β:
//!
//! ```text
//! u(θ) = (c − 2k) / (1 + (2k/c) sinh²θ)
//! x(θ) = 2θ/β + ln( cosh(θ − θ₀) / cosh(θ + θ₀) )
//! ```
//!
//! θ ↦ x(θ) is odd and strictly increasing (x′ = 2/β + tanh(θ−θ₀) −
//! tanh(θ+θ₀) ≥ 2(2k/c)/β > 0), so φ_c(x) = u(θ(x)) is obtained by a
//! safeguarded Newton inversion. On θ ≥ 0 the map is convex (x″ =
//! sech²(θ−θ₀) − sech²(θ+θ₀) ≥ 0) and x(θ) ≥ 2θ/β − 2θ₀, which yields the
//! guaranteed upper bracket θ ≤ β(x + 2θ₀)/2 used as the Newton seed.
//!
//! The profile decays like e^{−β|x|}, so on a periodic box of length L the
//! sampled profile is an accurate periodic solution as long as the tail
//! value at ±L/2 is negligible; [`build_profile`] enforces this.

use std::sync::Arc;

use crate::error::{ChError, Result};
use crate::grid::{Field, PeriodicGrid};

/// Base step for the central finite difference in c used by [`dphi_dc_field`].
pub const C_DERIVATIVE_STEP: f64 = 1e-4;

/// Largest tolerated boundary value of φ_c relative to its peak height.
///
/// The wrap-around error committed by sampling the decaying profile on one
/// period is of the order of the boundary value, so this keeps periodization
/// effects at least six orders below the peak. (For the default c=3, k=1,
/// L=80 the boundary value is ≈ 2.6e−10 relative.)
pub const TAIL_RELATIVE_TOL: f64 = 1e-6;

// ─────────────────────────── Parameters ──────────────────────────────────

/// The pair (c, k) identifying a smooth solitary wave.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolitonParams {
    c: f64,
    k: f64,
}

impl SolitonParams {
    /// Validate k > 0 and c > 2k (which also implies c > k).
    pub fn new(c: f64, k: f64) -> Result<Self> {
        if !(k.is_finite() && k > 0.0) {
            return Err(ChError::InvalidParams(format!(
                "dispersion k must be positive, got {k}"
            )));
        }
        if !(c.is_finite() && c > 2.0 * k) {
            return Err(ChError::InvalidParams(format!(
                "smooth solitary wave requires c > 2k, got c = {c}, k = {k}"
            )));
        }
        Ok(Self { c, k })
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    /// Peak height c − 2k.
    pub fn peak_height(&self) -> f64 {
        self.c - 2.0 * self.k
    }

    /// Spatial decay rate β = √(1 − 2k/c) ∈ (0, 1).
    pub fn decay_rate(&self) -> f64 {
        (1.0 - 2.0 * self.k / self.c).sqrt()
    }
}

// ───────────────────────── Parametric map ────────────────────────────────

/// Numerically stable ln cosh t = |t| + ln(1 + e^{−2|t|}) − ln 2.
fn ln_cosh(t: f64) -> f64 {
    t.abs() + (-2.0 * t.abs()).exp().ln_1p() - std::f64::consts::LN_2
}

/// Cached constants of the parametric representation for one (c, k).
struct ParametricMap {
    amp: f64,
    rho: f64,
    beta: f64,
    theta0: f64,
    /// sinh²θ_max ≈ 1e16·c/2k, i.e. u(θ_max) ≈ 1e−16·(c−2k).
    theta_max: f64,
    x_max: f64,
}

impl ParametricMap {
    fn new(p: SolitonParams) -> Self {
        let beta = p.decay_rate();
        let rho = 2.0 * p.k / p.c;
        let theta_max = (1e8 / rho.sqrt()).asinh();
        let theta0 = beta.atanh();
        let mut map = Self {
            amp: p.peak_height(),
            rho,
            beta,
            theta0,
            theta_max,
            x_max: 0.0,
        };
        map.x_max = map.x_of(theta_max);
        map
    }

    fn u_of(&self, theta: f64) -> f64 {
        let s = theta.sinh();
        self.amp / (1.0 + self.rho * s * s)
    }

    /// Oracle for the spectral derivative tests (unused outside them).
    #[cfg(test)]
    fn du_dtheta(&self, theta: f64) -> f64 {
        let s = theta.sinh();
        let denom = 1.0 + self.rho * s * s;
        -self.amp * self.rho * (2.0 * theta).sinh() / (denom * denom)
    }

    fn x_of(&self, theta: f64) -> f64 {
        2.0 * theta / self.beta + ln_cosh(theta - self.theta0) - ln_cosh(theta + self.theta0)
    }

    fn dx_dtheta(&self, theta: f64) -> f64 {
        2.0 / self.beta + (theta - self.theta0).tanh() - (theta + self.theta0).tanh()
    }

    /// Solve x(θ) = x for θ ≥ 0, given 0 ≤ x ≤ x_max.
    ///
    /// Newton from the guaranteed upper bracket, safeguarded by bisection.
    ///
    /// # Panics
    /// If the iteration fails to converge — mathematically impossible for a
    /// valid bracket, so this signals a root-finder bug, not bad data.
    fn invert(&self, x: f64) -> f64 {
        if x == 0.0 {
            return 0.0;
        }
        let mut lo = 0.0_f64;
        let mut hi = (0.5 * self.beta * (x + 2.0 * self.theta0)).min(self.theta_max);
        let mut theta = hi;
        let ftol = 1e-12 * (1.0 + x);
        for _ in 0..100 {
            let f = self.x_of(theta) - x;
            if f.abs() <= ftol {
                return theta;
            }
            let d = self.dx_dtheta(theta);
            assert!(
                d > 0.0,
                "parametric map must be strictly increasing: x'({theta}) = {d}"
            );
            if f > 0.0 {
                hi = theta;
            } else {
                lo = theta;
            }
            let mut next = theta - f / d;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - theta).abs() <= 1e-15 * (1.0 + theta) {
                return next;
            }
            theta = next;
        }
        panic!(
            "θ-inversion did not converge for x = {x} (β = {}, θ₀ = {}); \
             root-finder configuration bug",
            self.beta, self.theta0
        );
    }

    /// φ_c(x) for any real x (even extension; 0 beyond the far tail).
    fn eval(&self, x: f64) -> f64 {
        let ax = x.abs();
        if ax >= self.x_max {
            return 0.0;
        }
        self.u_of(self.invert(ax))
    }

    /// dφ_c/dx at x, directly from the parametric form: u′(θ)/x′(θ).
    /// Oracle for the spectral derivative tests (unused outside them).
    #[cfg(test)]
    fn eval_slope(&self, x: f64) -> f64 {
        let ax = x.abs();
        if ax >= self.x_max {
            return 0.0;
        }
        let theta = self.invert(ax);
        let slope = self.du_dtheta(theta) / self.dx_dtheta(theta);
        if x >= 0.0 {
            slope
        } else {
            -slope
        }
    }
}

// ─────────────────────────── Evaluation ──────────────────────────────────

/// Evaluate φ_c at a single point by inverting the parametric map.
pub fn profile_at(params: SolitonParams, x: f64) -> f64 {
    ParametricMap::new(params).eval(x)
}

/// Sample φ_c at every grid node (no tail check — see [`build_profile`]).
///
/// Useful when scanning candidate speeds whose validity is established
/// separately, e.g. inside the modulation Newton iteration.
pub fn sample_profile(params: SolitonParams, grid: &Arc<PeriodicGrid>) -> Field {
    let map = ParametricMap::new(params);
    Field::from_values(
        grid,
        grid.nodes().iter().map(|&x| map.eval(x)).collect(),
    )
}

/// ∂φ_c/∂c sampled on the grid: Richardson-extrapolated central difference
/// in c, (4·D(δ/2) − D(δ))/3 with D(δ) = (φ_{c+δ} − φ_{c−δ})/(2δ).
///
/// The base step shrinks near the existence boundary so that c ± δ stays
/// inside c > 2k.
pub fn dphi_dc_field(params: SolitonParams, grid: &Arc<PeriodicGrid>) -> Result<Field> {
    let delta = C_DERIVATIVE_STEP.min(0.25 * params.peak_height());
    let d_big = c_central_difference(params, grid, delta)?;
    let d_small = c_central_difference(params, grid, 0.5 * delta)?;
    Ok(d_small.scaled(4.0).minus(&d_big).scaled(1.0 / 3.0))
}

fn c_central_difference(
    params: SolitonParams,
    grid: &Arc<PeriodicGrid>,
    delta: f64,
) -> Result<Field> {
    let up = SolitonParams::new(params.c + delta, params.k)?;
    let dn = SolitonParams::new(params.c - delta, params.k)?;
    Ok(sample_profile(up, grid)
        .minus(&sample_profile(dn, grid))
        .scaled(0.5 / delta))
}

// ───────────────────────────── Profile ───────────────────────────────────

/// A solitary wave sampled on a grid, with its x- and c-derivatives.
#[derive(Clone)]
pub struct SolitonProfile {
    params: SolitonParams,
    phi: Field,
    dphi_dx: Field,
    dphi_dc: Field,
}

impl SolitonProfile {
    pub fn params(&self) -> SolitonParams {
        self.params
    }

    /// The profile φ_c, peaked at x = 0.
    pub fn phi(&self) -> &Field {
        &self.phi
    }

    /// Spectral ∂xφ_c.
    pub fn dphi_dx(&self) -> &Field {
        &self.dphi_dx
    }

    /// Finite-difference ∂cφ_c.
    pub fn dphi_dc(&self) -> &Field {
        &self.dphi_dc
    }

    pub fn grid(&self) -> &Arc<PeriodicGrid> {
        self.phi.grid()
    }
}

/// Build φ_c on the grid together with ∂xφ_c (spectral) and ∂cφ_c
/// (Richardson finite difference in c).
///
/// Fails with `DomainTooSmall` when the profile has not decayed to
/// [`TAIL_RELATIVE_TOL`]·(c−2k) at the box boundary ±L/2, since the sampled
/// field would then be a poor periodic approximation.
pub fn build_profile(params: SolitonParams, grid: &Arc<PeriodicGrid>) -> Result<SolitonProfile> {
    let boundary = profile_at(params, 0.5 * grid.length());
    let tol = TAIL_RELATIVE_TOL * params.peak_height();
    if boundary > tol {
        return Err(ChError::DomainTooSmall(format!(
            "φ_c(±L/2) = {boundary:.3e} exceeds {tol:.3e} for c = {}, k = {}, L = {}; \
             enlarge the box or increase c − 2k",
            params.c,
            params.k,
            grid.length()
        )));
    }
    let phi = sample_profile(params, grid);
    let dphi_dx = phi.deriv(1);
    let dphi_dc = dphi_dc_field(params, grid)?;
    Ok(SolitonProfile {
        params,
        phi,
        dphi_dx,
        dphi_dc,
    })
}

// ─────────────────────────── ODE residual ────────────────────────────────

/// Max-norm residual of the traveling-wave equation
///
/// ```text
/// −cφ + cφ_xx + (3/2)φ² + 2kφ = φφ_xx + ½φ_x²
/// ```
///
/// normalized by max|φ|. Vanishes (to spectral accuracy) exactly on the
/// solitary-wave family.
pub fn ode_residual(profile: &SolitonProfile) -> f64 {
    ode_residual_field(&profile.phi, profile.params)
}

/// Residual of the traveling-wave equation for an arbitrary field, used both
/// by [`ode_residual`] and by tests that translate or perturb the profile.
pub fn ode_residual_field(phi: &Field, params: SolitonParams) -> f64 {
    let (c, k) = (params.c, params.k);
    let phi_x = phi.deriv(1);
    let phi_xx = phi.deriv(2);
    let n = phi.len();
    let mut worst = 0.0_f64;
    for i in 0..n {
        let (u, ux, uxx) = (phi.values()[i], phi_x.values()[i], phi_xx.values()[i]);
        let r = (2.0 * k - c) * u + c * uxx + 1.5 * u * u - u * uxx - 0.5 * ux * ux;
        worst = worst.max(r.abs());
    }
    worst / phi.max_abs()
}

// ─────────────────────────── Persistence ─────────────────────────────────

/// Write the profile and its two tangent fields as CSV with columns
/// `x, phi, dphi_dx, dphi_dc`.
pub fn write_profile_csv(profile: &SolitonProfile, path: &std::path::Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["x", "phi", "dphi_dx", "dphi_dc"])?;
    for (i, &x) in profile.grid().nodes().iter().enumerate() {
        wtr.write_record([
            format!("{x:.12e}"),
            format!("{:.12e}", profile.phi.values()[i]),
            format!("{:.12e}", profile.dphi_dx.values()[i]),
            format!("{:.12e}", profile.dphi_dc.values()[i]),
        ])?;
    }
    wtr.flush().map_err(std::io::Error::from)?;
    Ok(())
}

// ───────────────────────────────── Tests ─────────────────────────────────
