//! Design and evaluation of phase-modulated control waveforms for qudits
//! encoded in the hyperfine ground manifold of an alkali atom (cesium-133 by
//! default, `d = 16`).
//!
//! The crate covers the rotating-frame control Hamiltonian ([`spin_model`]),
//! exact piecewise-constant propagation with analytic step derivatives
//! ([`propagation`]), fidelity objectives and robust ensemble averages
//! ([`objectives`]), multi-start gradient ascent ([`grape`]), random target
//! sampling ([`targets`]), simulated randomized benchmarking
//! ([`benchmarking`]), grid studies ([`sweeps`]) and file formats ([`io`]).

pub mod benchmarking;
pub mod error;
pub mod grape;
pub mod io;
pub mod linalg;
pub mod objectives;
pub mod propagation;
pub mod spin_model;
pub mod sweeps;
pub mod targets;

pub use error::{ControlError, Result};
pub use grape::{design, AscentMethod, DesignConfig, OptimizationReport};
pub use linalg::{CMatrix, CVector};
pub use objectives::{
    fidelity, fidelity_full, fidelity_subspace, objective_with_gradient, ObjectiveValue,
    PerturbationEnsemble, Subspace, TargetKind, TargetMap,
};
pub use propagation::{propagate, ControlWaveform, FieldTrajectory};
pub use spin_model::{angular, ManifoldStructure, PhysicalParams, StepPhases};
pub use targets::RngStream;
