//! Simulation and feedback control of diffusive quantum non-demolition
//! measurements.
//!
//! * [`qop`]: density matrices, Hermitian operators, superoperators and Bloch coordinates.
//! * [`sme`]: Euler–Maruyama integration of the stochastic master equation and ensemble runners.
//! * [`control`]: static output feedback, adaptive state feedback and smooth state feedback.
//! * [`analysis`]: Lyapunov certificates, generators and decay verdicts.

pub mod analysis;
pub mod control;
pub mod error;
pub mod qop;
pub mod rng;
pub mod sme;

pub use analysis::{
    check_decay, check_exponential_bound, check_p_stability, generator_adaptive_xyxi, generator_openloop_xi,
    mc_generator_estimate, oracle_cross_checks, simulate_reduced, BoundKind, GeneratorEstimate, LyapunovKind,
    LyapunovSpec, OracleCheck, OracleSettings, ReducedState, ReducedSystem, ReducedTrajectory, Verdict,
};
pub use control::{lemma2_invariance_witness, z_rotation, ControlOutput, Controller, Target};
pub use error::{Error, Result};
pub use qop::{
    commutator, expectation, fidelity, from_bloch, lindblad_d, measurement_m, qnd_spectrum, to_bloch, trace_distance,
    BlochVector, CMatrix, DensityMatrix, HermitianOperator, QndSpectrum, C64,
};
pub use rng::NoiseStream;
pub use sme::{
    add_decoherence, step_closed_expanded, step_closed_propagator, step_open_loop, Ensemble, EnsembleStats, QndSystem,
    SeriesStats, SimParams, Simulation, StepResult, Stepper, TrajectoryRecord,
};
