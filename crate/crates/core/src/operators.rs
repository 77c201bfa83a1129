//! Hamiltonians, variational gradients, the nonlocal pressure and the
//! linearized operator around a solitary wave.
//!
//! The equation conserves two Hamiltonians,
//!
//! ```text
//! H₁(u) = ½∫ u² + u_x² dx,        H₂(u) = ½∫ u³ + u u_x² + 2k u² dx,
//! ```
//!
//! whose variational derivatives (computed here by integration by parts and
//! cross-checked in the tests against centered Gateaux differences) are
//!
//! ```text
//! H₁′(u) = u − u_xx,
//! H₂′(u) = (3/2)u² − ½u_x² − u u_xx + 2k u.
//! ```
//!
//! A solitary wave φ_c is a critical point of H_c = cH₁ − H₂, i.e.
//! cH₁′(φ_c) − H₂′(φ_c) = 0, and the linearized operator of H_c around φ_c
//! (in the divergence-form normalization used throughout this crate) is
//!
//! ```text
//! L_c w = −∂x((2c − 2φ_c)∂x w) − 6φ_c w + 2(∂x²φ_c) w + 2(c − 2k) w,
//! ```
//!
//! self-adjoint with translation zero mode L_c ∂xφ_c = 0.
//!
//! The evolution itself is written in nonlocal form u_t + uu_x + ∂xP = 0
//! with the pressure P = (1−∂x²)⁻¹(u² + ½u_x² + 2ku) ([`pressure`]). The
//! quadratic remainder f(η) and the speed-mismatch commutator g(η) that
//! appear when the solution is decomposed around a moving solitary wave are
//! provided as standalone fields.
//!
//! All quadratic products are projected onto the 2/3-rule band before
//! further transforms (inputs band-limited to ⌊N/3⌋ then yield alias-free
//! products), matching the solver's discipline.

use crate::grid::Field;
use crate::soliton::SolitonProfile;

// ─────────────────────────── Hamiltonians ────────────────────────────────

/// H₁(u) = ½∫ u² + u_x² dx.
pub fn hamiltonian_h1(u: &Field) -> f64 {
    let ux = u.deriv(1);
    0.5 * (u.inner(u) + ux.inner(&ux))
}

/// H₂(u) = ½∫ u³ + u u_x² + 2k u² dx.
pub fn hamiltonian_h2(u: &Field, k: f64) -> f64 {
    let ux = u.deriv(1);
    0.5 * (u.times(u).inner(u) + u.times(&ux).inner(&ux) + 2.0 * k * u.inner(u))
}

/// Variational derivative H₁′(u) = u − u_xx.
pub fn h1_grad(u: &Field) -> Field {
    u.minus(&u.deriv(2))
}

/// Variational derivative H₂′(u) = (3/2)u² − ½u_x² − u u_xx + 2k u.
pub fn h2_grad(u: &Field, k: f64) -> Field {
    let ux = u.deriv(1);
    let uxx = u.deriv(2);
    let n = u.len();
    let mut quad = vec![0.0; n];
    for i in 0..n {
        let (v, vx, vxx) = (u.values()[i], ux.values()[i], uxx.values()[i]);
        quad[i] = 1.5 * v * v - 0.5 * vx * vx - v * vxx;
    }
    Field::from_values(u.grid(), quad)
        .dealiased()
        .add_scaled(u, 2.0 * k)
}

// ───────────────────────────── Pressure ──────────────────────────────────

/// Nonlocal pressure P = (1−∂x²)⁻¹(u² + ½u_x² + 2ku).
pub fn pressure(u: &Field, k: f64) -> Field {
    let ux = u.deriv(1);
    let n = u.len();
    let mut quad = vec![0.0; n];
    for i in 0..n {
        let (v, vx) = (u.values()[i], ux.values()[i]);
        quad[i] = v * v + 0.5 * vx * vx;
    }
    Field::from_values(u.grid(), quad)
        .dealiased()
        .add_scaled(u, 2.0 * k)
        .helmholtz_inv()
}

// ─────────────────────── Linearized operator ─────────────────────────────

/// The linearized operator L_c of H_c = cH₁ − H₂ around a solitary wave,
/// kept in divergence form.
#[derive(Clone)]
pub struct LinearizedOperator {
    c: f64,
    k: f64,
    phi: Field,
    phi_xx: Field,
}

impl LinearizedOperator {
    /// Assemble the operator from a speed, a (sampled) wave profile and the
    /// dispersion parameter. `phi_xx` is computed spectrally.
    pub fn new(c: f64, phi: &Field, k: f64) -> Self {
        Self {
            c,
            k,
            phi: phi.clone(),
            phi_xx: phi.deriv(2),
        }
    }

    /// Operator at the profile's own speed.
    pub fn from_profile(profile: &SolitonProfile) -> Self {
        Self::new(profile.params().c(), profile.phi(), profile.params().k())
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    /// L_c w = −∂x((2c−2φ)∂x w) − 6φ w + 2(∂x²φ) w + 2(c−2k) w.
    pub fn apply(&self, w: &Field) -> Field {
        let wx = w.deriv(1);
        let n = w.len();
        let mut flux = vec![0.0; n];
        let mut mult = vec![0.0; n];
        for i in 0..n {
            let (p, pxx) = (self.phi.values()[i], self.phi_xx.values()[i]);
            flux[i] = (2.0 * self.c - 2.0 * p) * wx.values()[i];
            mult[i] = (-6.0 * p + 2.0 * pxx + 2.0 * (self.c - 2.0 * self.k)) * w.values()[i];
        }
        let divergence = Field::from_values(w.grid(), flux).dealiased().deriv(1);
        Field::from_values(w.grid(), mult)
            .dealiased()
            .minus(&divergence)
    }
}

// ──────────────────────── Remainder nonlinearities ───────────────────────

/// Quadratic remainder f(η) = −ηη_x − (1−∂x²)⁻¹∂x(η² + ½η_x²).
///
/// Satisfies the cancellation ((1−∂x²)f(η), η) = 0, which is what makes the
/// H¹ norm of the remainder controllable.
pub fn f_of_eta(eta: &Field) -> Field {
    let ex = eta.deriv(1);
    let n = eta.len();
    let mut advect = vec![0.0; n];
    let mut quad = vec![0.0; n];
    for i in 0..n {
        let (e, dx) = (eta.values()[i], ex.values()[i]);
        advect[i] = -e * dx;
        quad[i] = e * e + 0.5 * dx * dx;
    }
    let nonlocal = Field::from_values(eta.grid(), quad)
        .dealiased()
        .deriv(1)
        .helmholtz_inv();
    Field::from_values(eta.grid(), advect)
        .dealiased()
        .minus(&nonlocal)
}

/// Speed-mismatch commutator g(η) ≔ ∂x(L_{c^ε} − L_{c₀})η, expanded:
///
/// ```text
/// g = −2∂x²((Δc − Δφ)∂xη) − 6∂x(Δφ η) + 2∂x((∂x²Δφ) η) + 2Δc ∂xη
/// ```
///
/// with Δc = c^ε − c₀ and Δφ = φ_{c^ε} − φ_{c₀}. Every term is linear in
/// the pair (Δc, Δφ), so ‖g(η)‖ = O(|c^ε − c₀|)·‖η‖ along the wave family.
pub fn g_of_eta(
    eta: &Field,
    c_eps: f64,
    profile_ceps: &SolitonProfile,
    profile_c0: &SolitonProfile,
) -> Field {
    let c0 = profile_c0.params().c();
    let dc = c_eps - c0;
    let dphi = profile_ceps.phi().minus(profile_c0.phi());
    let dphi_xx = dphi.deriv(2);
    let ex = eta.deriv(1);

    let n = eta.len();
    let mut flux = vec![0.0; n];
    let mut shape = vec![0.0; n];
    for i in 0..n {
        let (dp, dpxx) = (dphi.values()[i], dphi_xx.values()[i]);
        flux[i] = (dc - dp) * ex.values()[i];
        shape[i] = (-6.0 * dp + 2.0 * dpxx) * eta.values()[i];
    }
    let flux_term = Field::from_values(eta.grid(), flux)
        .dealiased()
        .deriv(2)
        .scaled(-2.0);
    let shape_term = Field::from_values(eta.grid(), shape).dealiased().deriv(1);
    flux_term
        .plus(&shape_term)
        .add_scaled(&ex, 2.0 * dc)
}

// ───────────────────────────────── Tests ─────────────────────────────────
