//! Crate-wide error type.
//!
//! Contract violations that indicate programming bugs (mismatched grids,
//! unsupported derivative orders) panic with a message instead; the variants
//! here cover data- and configuration-dependent failures that a caller can
//! meaningfully react to (abort a path, reject a config, signal an exit).

use thiserror::Error;

#[derive(Error, Debug)]
pub enum ChError {
    /// Grid construction rejected (bad length, N not a power of two, ...).
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    /// Parameter validation failed (soliton parameters, measure atoms, ...).
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    /// The periodic box is too small for the requested profile: the soliton
    /// tail does not decay below tolerance at the boundary.
    #[error("domain too small: {0}")]
    DomainTooSmall(String),

    /// A single jump would transport mass farther than the domain can
    /// resolve (|amplitude|·max|σ| exceeds L/4).
    #[error("jump too large for domain: {0}")]
    JumpTooLarge(String),

    /// The advective CFL guard tripped during time stepping.
    #[error("CFL violation: {0}")]
    CflViolation(String),

    /// A non-finite value appeared in an evolving state.
    #[error("non-finite field value: {0}")]
    NonFinite(String),

    /// Newton failed to converge or the modulation system became singular.
    /// Tracking converts this into an exit event; it only escapes as an
    /// error from direct calls to `extract`/`solve_coeffs`.
    #[error("modulation breakdown: {0}")]
    ModulationBreakdown(String),

    /// Run-configuration parsing or validation failed.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, ChError>;
