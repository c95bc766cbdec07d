//! Semiclassical simulation of dipole-coupled two-level atoms moving in a
//! lossy, incoherently pumped optical cavity.

pub mod couplings;
pub mod dynamics;
pub mod error;
pub mod integrator;
pub mod io;
pub mod liouvillian;
pub mod observables;
pub mod operators;
pub mod spectrum;
pub mod sweep;

pub use couplings::CouplingParams;
pub use dynamics::{
    evolve, CoupledState, EvolveOptions, MotionMode, MotionState, Propagator, SystemParams,
};
pub use error::{CavityError, Result};
pub use integrator::Tolerances;
pub use observables::{StabilityVerdict, Trajectory};
pub use operators::{HilbertLayout, QuantumState, C64};
pub use spectrum::{SpectrumOptions, SpectrumResult};
pub use sweep::{CellOptions, MomentumSampler, ScanGrid, ScanResult};
