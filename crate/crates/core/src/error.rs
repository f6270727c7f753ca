use thiserror::Error;

/// Errors raised by the operator algebra, the integrators and the controllers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}x{expected}, got {found}x{found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not Hermitian (max deviation {deviation:.3e})")]
    NotHermitian { deviation: f64 },

    #[error("not a density matrix: {0}")]
    InvalidState(String),

    #[error("degenerate spectrum: eigenvalue gap {gap:.3e} is below {tolerance:.1e}")]
    DegenerateSpectrum { gap: f64, tolerance: f64 },

    #[error("operation requires a qubit (dimension 2), got dimension {0}")]
    NotQubit(usize),

    #[error("invalid simulation parameters: {0}")]
    InvalidParams(String),

    #[error("invalid controller: {0}")]
    InvalidController(String),

    #[error(
        "integrator diverged at t = {time:.6}: eigenvalue {min_eigenvalue:.3e} before projection; \
         try a smaller dt"
    )]
    IntegratorDiverged { time: f64, min_eigenvalue: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
