//! Feedback laws of the form `u dt = f dt + kappa dY`.
//!
//! A controller is a pure function of the current state returning the
//! coefficient `f` of `dt`, the gain `kappa` on the measurement record and
//! the actuation Hamiltonian `F` generating `exp(-i F u dt)`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qop::{
    bloch_unchecked, commutator, BlochVector, CMatrix, DensityMatrix, HermitianOperator, QndSpectrum, C64,
};
use crate::sme::SimParams;

/// Which eigenstate of `sigma_z` the adaptive law stabilizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Excited,
    Ground,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Controller {
    /// Open loop.
    Null,
    /// Constant-gain output feedback stabilizing the pure state with polar
    /// angle `theta_bar` and azimuth `alpha_bar`.
    StaticOutput { theta_bar: f64, alpha_bar: f64 },
    /// State-dependent gains stabilizing an eigenstate of `sigma_z`.
    AdaptiveQnd { target: Target },
    /// Smooth state feedback `u = -alpha tr(i[sigma_y, rho] sigma_z) + beta (1 - z)`
    /// without output feedback.
    SmoothState { alpha: f64, beta: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutput {
    pub f: f64,
    pub kappa: f64,
    pub actuator: HermitianOperator,
}

impl Controller {
    pub fn static_output(theta_bar: f64, alpha_bar: f64) -> Result<Self> {
        let c = Controller::StaticOutput { theta_bar, alpha_bar };
        c.validate(1.0)?;
        Ok(c)
    }

    pub fn smooth_state(alpha: f64, beta: f64, eta: f64) -> Result<Self> {
        let c = Controller::SmoothState { alpha, beta };
        c.validate(eta)?;
        Ok(c)
    }

    /// Checks the parameter constraints of the variant against efficiency `eta`.
    pub fn validate(&self, eta: f64) -> Result<()> {
        match *self {
            Controller::Null | Controller::AdaptiveQnd { .. } => Ok(()),
            Controller::StaticOutput { theta_bar, alpha_bar } => {
                if !theta_bar.is_finite() || !alpha_bar.is_finite() {
                    return Err(Error::InvalidController("angles must be finite".into()));
                }
                if !(theta_bar > 0.0 && theta_bar < PI) {
                    return Err(Error::InvalidController(format!(
                        "theta_bar = {theta_bar} must lie strictly between 0 and pi"
                    )));
                }
                if !(0.0..=2.0 * PI).contains(&alpha_bar) {
                    return Err(Error::InvalidController(format!(
                        "alpha_bar = {alpha_bar} must lie in [0, 2 pi]"
                    )));
                }
                Ok(())
            }
            Controller::SmoothState { alpha, beta } => {
                if !(alpha > 0.0 && beta > 0.0) || !alpha.is_finite() || !beta.is_finite() {
                    return Err(Error::InvalidController("alpha and beta must be positive".into()));
                }
                let ratio = beta * beta / (8.0 * alpha * eta);
                if !(ratio < 1.0) {
                    return Err(Error::InvalidController(format!(
                        "beta^2 / (8 alpha eta) = {ratio} must be below 1"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Controller::Null)
    }

    /// The actuation Hamiltonian, `None` in open loop.
    pub fn actuator(&self) -> Option<HermitianOperator> {
        match *self {
            Controller::Null => None,
            Controller::StaticOutput { alpha_bar, .. } => Some(
                HermitianOperator::sigma_y()
                    .conjugated_by(&z_rotation(alpha_bar))
                    .expect("2x2 rotation"),
            ),
            Controller::AdaptiveQnd { .. } | Controller::SmoothState { .. } => Some(HermitianOperator::sigma_y()),
        }
    }

    /// `(f, kappa)` at the Bloch vector `b`.
    #[inline]
    pub fn gains(&self, b: &BlochVector, eta: f64, gamma: f64) -> (f64, f64) {
        match *self {
            Controller::Null => (0.0, 0.0),
            Controller::StaticOutput { theta_bar, .. } => {
                let (s, c) = theta_bar.sin_cos();
                (-0.5 * gamma * s * c, (0.5 * gamma).sqrt() * s)
            }
            Controller::AdaptiveQnd { target } => {
                let scale = 0.5 * eta * gamma;
                let f = -scale * (1.0 - b.z * b.z);
                match target {
                    Target::Excited => (f, scale.sqrt() * (1.0 - b.z)),
                    // Conjugation by sigma_x maps the ground-state problem
                    // onto the excited one but also flips sigma_y, hence -f.
                    Target::Ground => (-f, scale.sqrt() * (1.0 + b.z)),
                }
            }
            // tr(i [sigma_y, rho] sigma_z) = 2 x
            Controller::SmoothState { alpha, beta } => (-2.0 * alpha * b.x + beta * (1.0 - b.z), 0.0),
        }
    }

    pub fn evaluate(&self, rho: &DensityMatrix, params: &SimParams) -> Result<ControlOutput> {
        self.validate(params.eta)?;
        match self.actuator() {
            None => Ok(ControlOutput {
                f: 0.0,
                kappa: 0.0,
                actuator: HermitianOperator::new(DMatrix::zeros(rho.dim(), rho.dim()))?,
            }),
            Some(actuator) => {
                if rho.dim() != 2 {
                    return Err(Error::NotQubit(rho.dim()));
                }
                let b = bloch_unchecked(rho.matrix());
                let (f, kappa) = self.gains(&b, params.eta, params.gamma);
                Ok(ControlOutput { f, kappa, actuator })
            }
        }
    }

    /// The pure state this controller stabilizes.
    pub fn target_state(&self) -> Result<DensityMatrix> {
        match *self {
            Controller::Null => Err(Error::InvalidController(
                "the open-loop controller has no target".into(),
            )),
            Controller::StaticOutput { theta_bar, alpha_bar } => {
                self.validate(1.0)?;
                let (s, c) = theta_bar.sin_cos();
                let rho = CMatrix::from_row_slice(
                    2,
                    2,
                    &[
                        C64::new(0.5 * (1.0 + c), 0.0),
                        C64::new(0.5 * s, 0.0),
                        C64::new(0.5 * s, 0.0),
                        C64::new(0.5 * (1.0 - c), 0.0),
                    ],
                );
                let u = z_rotation(alpha_bar);
                let m = &u * rho * u.adjoint();
                DensityMatrix::new((&m + m.adjoint()) * C64::new(0.5, 0.0))
            }
            Controller::AdaptiveQnd { target: Target::Ground } => Ok(DensityMatrix::ground()),
            Controller::AdaptiveQnd {
                target: Target::Excited,
            }
            | Controller::SmoothState { .. } => Ok(DensityMatrix::excited()),
        }
    }
}

/// `exp(-i alpha sigma_z / 2)`.
pub fn z_rotation(alpha: f64) -> CMatrix {
    let half = 0.5 * alpha;
    CMatrix::from_row_slice(
        2,
        2,
        &[
            C64::from_polar(1.0, -half),
            C64::new(0.0, 0.0),
            C64::new(0.0, 0.0),
            C64::from_polar(1.0, half),
        ],
    )
}

/// Whether `[F, rho_l]` vanishes, in which case constant-gain output
/// feedback through `F` leaves `tr(rho rho_l)` frozen and cannot steer the
/// state onto `rho_l`.
pub fn lemma2_invariance_witness(actuator: &HermitianOperator, ell: usize, spectrum: &QndSpectrum) -> Result<bool> {
    let projector = spectrum.projectors().get(ell).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "eigenstate index {ell} out of range for dimension {}",
            spectrum.dim()
        ))
    })?;
    let c = commutator(actuator.matrix(), projector.matrix())?;
    Ok(c.iter().map(|v| v.norm()).fold(0.0, f64::max) <= 1e-12)
}
