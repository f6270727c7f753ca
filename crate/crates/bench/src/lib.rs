//! Fixtures shared by the benchmarks.

use qnd_core::{Controller, DensityMatrix, HermitianOperator, QndSystem, SimParams, Simulation, Stepper, Target};

pub const DT: f64 = 1e-4;

pub fn params(eta: f64) -> SimParams {
    SimParams {
        dt: DT,
        eta,
        ..SimParams::default()
    }
}

/// Adaptive feedback on the qubit at `eta = 0.5`.
pub fn adaptive(stepper: Stepper) -> Simulation {
    Simulation::new(
        QndSystem::qubit(1.0).expect("qubit"),
        Controller::AdaptiveQnd {
            target: Target::Excited,
        },
        params(0.5),
    )
    .expect("valid simulation")
    .with_stepper(stepper)
}

/// Open-loop measurement of a diagonal observable with `n` evenly spaced eigenvalues.
pub fn open_loop(n: usize) -> Simulation {
    let eigenvalues: Vec<f64> = (0..n).map(|k| k as f64 - 0.5 * (n - 1) as f64).collect();
    let l = HermitianOperator::diagonal(&eigenvalues).expect("diagonal");
    Simulation::new(
        QndSystem::new(l).expect("non-degenerate"),
        Controller::Null,
        params(1.0),
    )
    .expect("valid simulation")
}

pub fn mixed(n: usize) -> DensityMatrix {
    DensityMatrix::maximally_mixed(n)
}
