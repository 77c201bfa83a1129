//! Uniform periodic grid with spectral calculus.
//!
//! Everything in this crate lives on a uniform grid of N nodes covering the
//! periodic box [−L/2, L/2). Derivatives, the Helmholtz inverse (1 − ∂x²)⁻¹,
//! translations and dealiasing are Fourier multipliers applied through cached
//! FFT plans:
//!
//! * `deriv`:          f̂ₘ ↦ (iξₘ)^order f̂ₘ,  ξₘ = 2πm/L
//! * `helmholtz_inv`:  f̂ₘ ↦ f̂ₘ / (1 + ξₘ²)
//! * `shifted(a)`:     f̂ₘ ↦ e^{−iξₘa} f̂ₘ   (samples of x ↦ f(x−a))
//! * dealiasing:       zero all modes with |m| > ⌊N/3⌋ (2/3 rule)
//!
//! Wavenumber layout follows the usual FFT ordering m = 0,1,…,N/2−1,−N/2,…,−1.
//! The Nyquist mode m = −N/2 has no conjugate partner in a real signal, so
//! odd-order derivatives zero it and `shifted` scales it by cos(ξa); in
//! practice all fields here are dealiased well below Nyquist and the bin is
//! machine zero.
//!
//! Inner products use the uniform-grid rectangle rule dx·Σ fᵢgᵢ, which is
//! spectrally accurate for smooth periodic integrands.
//!
//! Fields are immutable after construction and all operations are pure, so
//! grids and fields can be shared freely across worker threads.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{ChError, Result};

// ─────────────────────────────── Grid ────────────────────────────────────

/// Uniform periodic grid on [−L/2, L/2) with cached FFT plans.
pub struct PeriodicGrid {
    length: f64,
    n: usize,
    dx: f64,
    nodes: Vec<f64>,
    /// Wavenumbers ξₘ = 2πm/L in FFT ordering.
    xi: Vec<f64>,
    /// Largest |m| kept by the 2/3-rule mask: ⌊N/3⌋.
    dealias_keep: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for PeriodicGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PeriodicGrid")
            .field("length", &self.length)
            .field("n", &self.n)
            .finish()
    }
}

impl PeriodicGrid {
    /// Build a grid of `n` nodes (power of two, ≥ 16) over a box of size
    /// `length` > 0.
    pub fn new(length: f64, n: usize) -> Result<Arc<Self>> {
        if !(length.is_finite() && length > 0.0) {
            return Err(ChError::InvalidGrid(format!(
                "box length must be positive and finite, got {length}"
            )));
        }
        if n < 16 || !n.is_power_of_two() {
            return Err(ChError::InvalidGrid(format!(
                "n_points must be a power of two ≥ 16, got {n}"
            )));
        }
        let dx = length / n as f64;
        let nodes = (0..n).map(|i| -0.5 * length + i as f64 * dx).collect();
        let two_pi_over_l = 2.0 * std::f64::consts::PI / length;
        let xi = (0..n)
            .map(|j| {
                let m = if j <= n / 2 { j as i64 } else { j as i64 - n as i64 };
                two_pi_over_l * m as f64
            })
            .collect();
        let mut planner = FftPlanner::new();
        Ok(Arc::new(Self {
            length,
            n,
            dx,
            nodes,
            xi,
            dealias_keep: n / 3,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }))
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn n_points(&self) -> usize {
        self.n
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    /// Node coordinates xᵢ = −L/2 + i·dx.
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Wavenumbers ξₘ = 2πm/L in FFT ordering.
    pub fn wavenumbers(&self) -> &[f64] {
        &self.xi
    }

    /// Largest |m| kept by the 2/3-rule dealiasing mask.
    pub fn dealias_keep(&self) -> usize {
        self.dealias_keep
    }

    /// Forward transform of real samples (unnormalized).
    pub fn fft(&self, values: &[f64]) -> Vec<Complex64> {
        assert_eq!(values.len(), self.n, "field length does not match grid");
        let mut buf: Vec<Complex64> =
            values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fwd.process(&mut buf);
        buf
    }

    /// Inverse transform back to real samples (normalized by 1/N).
    pub fn ifft_real(&self, mut spectrum: Vec<Complex64>) -> Vec<f64> {
        assert_eq!(spectrum.len(), self.n, "spectrum length does not match grid");
        self.inv.process(&mut spectrum);
        let scale = 1.0 / self.n as f64;
        spectrum.iter().map(|c| c.re * scale).collect()
    }

    /// Zero all modes with |m| > ⌊N/3⌋ in place.
    pub fn dealias_spectrum(&self, spectrum: &mut [Complex64]) {
        assert_eq!(spectrum.len(), self.n, "spectrum length does not match grid");
        let keep = self.dealias_keep;
        for (j, c) in spectrum.iter_mut().enumerate() {
            let m = if j <= self.n / 2 { j } else { self.n - j };
            if m > keep {
                *c = Complex64::new(0.0, 0.0);
            }
        }
    }

    /// Spectral multiplier of the `order`-th derivative at mode index `j`,
    /// with the Nyquist bin zeroed for odd orders.
    fn deriv_multiplier(&self, j: usize, order: u32) -> Complex64 {
        let xi = self.xi[j];
        if order % 2 == 1 && j == self.n / 2 {
            return Complex64::new(0.0, 0.0);
        }
        Complex64::new(0.0, xi).powu(order)
    }

    fn same_grid(&self, other: &PeriodicGrid) -> bool {
        std::ptr::eq(self, other) || (self.n == other.n && self.length == other.length)
    }
}

// ─────────────────────────────── Field ───────────────────────────────────

/// Real samples of a periodic function on a [`PeriodicGrid`].
#[derive(Clone)]
pub struct Field {
    grid: Arc<PeriodicGrid>,
    values: Vec<f64>,
}

impl fmt::Debug for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Field")
            .field("n", &self.values.len())
            .field("max_abs", &self.max_abs())
            .finish()
    }
}

impl Field {
    /// Zero field.
    pub fn zeros(grid: &Arc<PeriodicGrid>) -> Self {
        Self {
            grid: Arc::clone(grid),
            values: vec![0.0; grid.n],
        }
    }

    /// Constant field.
    pub fn constant(grid: &Arc<PeriodicGrid>, value: f64) -> Self {
        Self {
            grid: Arc::clone(grid),
            values: vec![value; grid.n],
        }
    }

    /// Sample a closure at the grid nodes.
    pub fn from_fn(grid: &Arc<PeriodicGrid>, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: Arc::clone(grid),
            values: grid.nodes.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Wrap an existing sample vector.
    ///
    /// # Panics
    /// If `values.len()` does not match the grid.
    pub fn from_values(grid: &Arc<PeriodicGrid>, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.n, "field length does not match grid");
        Self {
            grid: Arc::clone(grid),
            values,
        }
    }

    pub fn grid(&self) -> &Arc<PeriodicGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn assert_same_grid(&self, other: &Field) {
        assert!(
            self.grid.same_grid(&other.grid),
            "fields live on different grids"
        );
    }

    // ── Spectral operations ──

    /// Spectral derivative of order 1, 2 or 3.
    ///
    /// # Panics
    /// If `order` is outside {1, 2, 3}.
    pub fn deriv(&self, order: u32) -> Field {
        assert!(
            (1..=3).contains(&order),
            "derivative order must be 1, 2 or 3, got {order}"
        );
        let g = &self.grid;
        let mut spec = g.fft(&self.values);
        for (j, c) in spec.iter_mut().enumerate() {
            *c *= g.deriv_multiplier(j, order);
        }
        Field::from_values(g, g.ifft_real(spec))
    }

    /// Apply (1 − ∂x²)⁻¹, i.e. the periodized convolution with ½e^{−|x|}.
    pub fn helmholtz_inv(&self) -> Field {
        let g = &self.grid;
        let mut spec = g.fft(&self.values);
        for (j, c) in spec.iter_mut().enumerate() {
            *c /= 1.0 + g.xi[j] * g.xi[j];
        }
        Field::from_values(g, g.ifft_real(spec))
    }

    /// Samples of x ↦ f(x − a): exact spectral translation.
    pub fn shifted(&self, a: f64) -> Field {
        let g = &self.grid;
        let mut spec = g.fft(&self.values);
        for (j, c) in spec.iter_mut().enumerate() {
            if j == g.n / 2 {
                // Nyquist bin: a real signal carries cos(ξx) here; translating
                // gives cos(ξ(x−a)) whose same-bin coefficient is cos(ξa).
                *c *= (g.xi[j] * a).cos();
            } else {
                let phase = Complex64::from_polar(1.0, -g.xi[j] * a);
                *c *= phase;
            }
        }
        Field::from_values(g, g.ifft_real(spec))
    }

    /// Projection onto the 2/3-rule band |m| ≤ ⌊N/3⌋.
    pub fn dealiased(&self) -> Field {
        let g = &self.grid;
        let mut spec = g.fft(&self.values);
        g.dealias_spectrum(&mut spec);
        Field::from_values(g, g.ifft_real(spec))
    }

    // ── Inner products and norms ──

    /// L² pairing dx·Σ fᵢgᵢ.
    ///
    /// # Panics
    /// If the fields live on different grids.
    pub fn inner(&self, other: &Field) -> f64 {
        self.assert_same_grid(other);
        let s: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum();
        s * self.grid.dx
    }

    /// H¹ pairing (f,g) + (f′,g′).
    pub fn h1_inner(&self, other: &Field) -> f64 {
        self.inner(other) + self.deriv(1).inner(&other.deriv(1))
    }

    pub fn l2_norm(&self) -> f64 {
        self.inner(self).sqrt()
    }

    pub fn h1_norm(&self) -> f64 {
        self.h1_inner(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().fold(f64::INFINITY, |m, &v| m.min(v))
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
    }

    /// Index of the node where the field attains its maximum value.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    // ── Pointwise algebra ──

    pub fn scaled(&self, s: f64) -> Field {
        Field {
            grid: Arc::clone(&self.grid),
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }

    pub fn plus(&self, other: &Field) -> Field {
        self.assert_same_grid(other);
        Field {
            grid: Arc::clone(&self.grid),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn minus(&self, other: &Field) -> Field {
        self.assert_same_grid(other);
        Field {
            grid: Arc::clone(&self.grid),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    /// self + s·other.
    pub fn add_scaled(&self, other: &Field, s: f64) -> Field {
        self.assert_same_grid(other);
        Field {
            grid: Arc::clone(&self.grid),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + s * b)
                .collect(),
        }
    }

    /// In-place self += s·other (hot-loop variant).
    pub fn add_scaled_inplace(&mut self, other: &Field, s: f64) {
        self.assert_same_grid(other);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += s * b;
        }
    }

    /// Pointwise product.
    pub fn times(&self, other: &Field) -> Field {
        self.assert_same_grid(other);
        Field {
            grid: Arc::clone(&self.grid),
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a * b)
                .collect(),
        }
    }

    /// Apply a scalar function pointwise.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            grid: Arc::clone(&self.grid),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

// ───────────────────────────────── Tests ─────────────────────────────────
