//! Numerical laboratory for a stochastically forced Camassa–Holm equation.

pub mod config;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod limit;
pub mod modulation;
pub mod noise;
pub mod operators;
pub mod soliton;
pub mod solver;

pub use config::{RunConfig, SigmaSpec};
pub use error::{ChError, Result};
pub use experiment::{ConvergenceRow, ExitRow, ExperimentReport, ReportMetadata, ReportRows};
pub use grid::{Field, PeriodicGrid};
pub use limit::LimitCoefficients;
pub use modulation::{ModulationCoefficients, ModulationState, ModulationTrack, SolitonFamily};
pub use noise::{IntensityMeasure, NoisePath};
pub use soliton::{SolitonParams, SolitonProfile};
pub use solver::{Sample, SampleKind, SolverConfig, Trajectory};
