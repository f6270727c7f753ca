//! Experiment configuration files.
//!
//! A config names a scenario and optionally overrides its parameters. Named
//! scenarios fill every unspecified field; `custom` requires the controller,
//! the initial state and `params.t_final`.

use std::path::{Path, PathBuf};

use qnd_core::{from_bloch, BlochVector, Controller, DensityMatrix, HermitianOperator, QndSystem, SimParams, Target};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Adaptive feedback from `I/2` with the exponential bound overlay.
    Fig1,
    /// Adaptive feedback under an extra decay channel.
    Fig2,
    /// Open-loop QND measurement.
    Openloop,
    /// Constant-gain output feedback.
    Lemma3,
    Custom,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Fig1 => "fig1",
            Scenario::Fig2 => "fig2",
            Scenario::Openloop => "openloop",
            Scenario::Lemma3 => "lemma3",
            Scenario::Custom => "custom",
        }
    }
}

/// Partial [`SimParams`]; unset fields come from the scenario.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsOverride {
    pub dt: Option<f64>,
    pub t_final: Option<f64>,
    pub eta: Option<f64>,
    pub gamma: Option<f64>,
    pub gamma_dec: Option<f64>,
    pub seed: Option<u64>,
    pub n_traj: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControllerSpec {
    Null,
    StaticOutput {
        theta_bar: f64,
        #[serde(default)]
        alpha_bar: f64,
    },
    AdaptiveQnd {
        target: Target,
    },
    SmoothState {
        alpha: f64,
        beta: f64,
    },
}

impl From<ControllerSpec> for Controller {
    fn from(spec: ControllerSpec) -> Self {
        match spec {
            ControllerSpec::Null => Controller::Null,
            ControllerSpec::StaticOutput { theta_bar, alpha_bar } => Controller::StaticOutput { theta_bar, alpha_bar },
            ControllerSpec::AdaptiveQnd { target } => Controller::AdaptiveQnd { target },
            ControllerSpec::SmoothState { alpha, beta } => Controller::SmoothState { alpha, beta },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialState {
    MaximallyMixed,
    /// First basis state; `|e>` for a qubit.
    Excited,
    /// Last basis state; `|g>` for a qubit.
    Ground,
    /// Qubit Bloch vector `[x, y, z]`.
    Bloch([f64; 3]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    #[serde(default)]
    pub params: ParamsOverride,
    #[serde(default)]
    pub controller: Option<ControllerSpec>,
    #[serde(default)]
    pub initial_state: Option<InitialState>,
    /// Eigenvalues of a diagonal measurement operator. Defaults to the qubit
    /// measurement `sqrt(gamma/2) sigma_z`.
    #[serde(default)]
    pub measurement: Option<Vec<f64>>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub emit_svg: bool,
    #[serde(default)]
    pub emit_trajectories: bool,
    /// Integration steps between recorded samples; by default about 1000
    /// samples per run.
    #[serde(default)]
    pub stride: Option<usize>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// serde_json reports the line and column of the offending field.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn for_scenario(scenario: Scenario) -> Self {
        Self {
            scenario,
            params: ParamsOverride::default(),
            controller: None,
            initial_state: None,
            measurement: None,
            output_dir: default_output_dir(),
            emit_svg: false,
            emit_trajectories: false,
            stride: None,
        }
    }

    /// Fills scenario defaults and validates the result.
    pub fn resolve(&self) -> Result<Experiment, CliError> {
        let o = &self.params;
        let missing = |field: &str| CliError::Config(format!("scenario custom requires `{field}`"));
        let (eta, controller, initial) = match self.scenario {
            Scenario::Fig1 | Scenario::Fig2 => (
                0.5,
                ControllerSpec::AdaptiveQnd {
                    target: Target::Excited,
                },
                InitialState::MaximallyMixed,
            ),
            Scenario::Openloop => (1.0, ControllerSpec::Null, InitialState::MaximallyMixed),
            Scenario::Lemma3 => (
                1.0,
                ControllerSpec::StaticOutput {
                    theta_bar: std::f64::consts::FRAC_PI_2,
                    alpha_bar: 0.0,
                },
                InitialState::MaximallyMixed,
            ),
            Scenario::Custom => (
                SimParams::default().eta,
                self.controller.ok_or_else(|| missing("controller"))?,
                self.initial_state.ok_or_else(|| missing("initial_state"))?,
            ),
        };
        let controller: Controller = self.controller.unwrap_or(controller).into();
        let initial = self.initial_state.unwrap_or(initial);
        let eta = o.eta.unwrap_or(eta);
        let gamma = o.gamma.unwrap_or(1.0);
        let gamma_dec = o.gamma_dec.unwrap_or(match self.scenario {
            Scenario::Fig2 => 0.1 * gamma,
            _ => 0.0,
        });

        let system = match &self.measurement {
            None => QndSystem::qubit(gamma),
            Some(eigenvalues) => HermitianOperator::diagonal(eigenvalues).and_then(QndSystem::new),
        }
        .map_err(|e| CliError::Config(format!("measurement: {e}")))?;

        let t_final = match (o.t_final, self.scenario) {
            (Some(t), _) => t,
            (None, Scenario::Fig1) => 40.0 / (eta * gamma),
            (None, Scenario::Fig2) => 100.0 / gamma,
            (None, Scenario::Openloop) => 10.0 / (0.5 * eta * system.spectrum().min_gap_squared()),
            (None, Scenario::Lemma3) => match controller {
                Controller::StaticOutput { theta_bar, .. } => 5.0 / (gamma * theta_bar.sin().powi(2)),
                _ => 10.0 / gamma,
            },
            (None, Scenario::Custom) => return Err(missing("params.t_final")),
        };
        let params = SimParams {
            dt: o.dt.unwrap_or(1e-4),
            t_final,
            eta,
            gamma,
            gamma_dec,
            seed: o.seed.unwrap_or(0),
            n_traj: o.n_traj.unwrap_or(100),
        };
        params
            .validate()
            .map_err(|e| CliError::Config(format!("params: {e}")))?;
        controller
            .validate(eta)
            .map_err(|e| CliError::Config(format!("controller: {e}")))?;

        let n = system.dim();
        let rho0 = match initial {
            InitialState::MaximallyMixed => Ok(DensityMatrix::maximally_mixed(n)),
            InitialState::Excited => DensityMatrix::basis(n, 0),
            InitialState::Ground => DensityMatrix::basis(n, n - 1),
            InitialState::Bloch([x, y, z]) if n == 2 => BlochVector::new(x, y, z).and_then(|b| from_bloch(&b)),
            InitialState::Bloch(_) => {
                return Err(CliError::Config(format!(
                    "initial_state: a Bloch vector needs a qubit, the measurement has dimension {n}"
                )))
            }
        }
        .map_err(|e| CliError::Config(format!("initial_state: {e}")))?;

        if self.stride == Some(0) {
            return Err(CliError::Config("stride: must be positive".into()));
        }
        let stride = self.stride.unwrap_or_else(|| (params.n_steps() / 1000).max(1));
        Ok(Experiment {
            scenario: self.scenario,
            params,
            controller,
            system,
            rho0,
            output_dir: self.output_dir.clone(),
            emit_svg: self.emit_svg,
            emit_trajectories: self.emit_trajectories,
            stride,
        })
    }
}

/// A fully specified run.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub scenario: Scenario,
    pub params: SimParams,
    pub controller: Controller,
    pub system: QndSystem,
    pub rho0: DensityMatrix,
    pub output_dir: PathBuf,
    pub emit_svg: bool,
    pub emit_trajectories: bool,
    pub stride: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fig1_defaults() {
        let e = ExperimentConfig::from_json(r#"{"scenario": "fig1"}"#)
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(e.params.eta, 0.5);
        assert_eq!(e.params.t_final, 80.0);
        assert_eq!(e.params.n_traj, 100);
        assert_eq!(e.params.gamma_dec, 0.0);
        assert_eq!(
            e.controller,
            Controller::AdaptiveQnd {
                target: Target::Excited
            }
        );
        assert_eq!(e.rho0, DensityMatrix::maximally_mixed(2));
    }

    #[test]
    fn fig2_defaults_to_tenth_of_gamma() {
        let e = ExperimentConfig::from_json(r#"{"scenario": "fig2", "params": {"gamma": 2.0}}"#)
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(e.params.gamma_dec, 0.2);
        assert_eq!(e.params.t_final, 50.0);
    }

    #[test]
    fn overrides_and_tagged_controllers_parse() {
        let text = r#"{
            "scenario": "custom",
            "params": {"t_final": 2.0, "eta": 0.8, "seed": 9},
            "controller": {"kind": "static_output", "theta_bar": 0.5},
            "initial_state": {"bloch": [0.1, 0.2, 0.3]}
        }"#;
        let e = ExperimentConfig::from_json(text).unwrap().resolve().unwrap();
        assert_eq!(e.params.seed, 9);
        assert_eq!(
            e.controller,
            Controller::StaticOutput {
                theta_bar: 0.5,
                alpha_bar: 0.0
            }
        );
    }

    #[test]
    fn unknown_fields_report_their_location() {
        let err = ExperimentConfig::from_json("{\n  \"scenario\": \"fig1\",\n  \"params\": {\"etaa\": 1}\n}")
            .unwrap_err()
            .to_string();
        assert!(err.contains("etaa") && err.contains("line 3"), "{err}");
    }

    #[test]
    fn custom_requires_its_fields() {
        let err = ExperimentConfig::from_json(r#"{"scenario": "custom", "controller": {"kind": "null"}}"#)
            .unwrap()
            .resolve()
            .unwrap_err();
        assert!(err.to_string().contains("initial_state"), "{err}");
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in [
            r#"{"scenario": "fig1", "params": {"eta": 1.5}}"#,
            r#"{"scenario": "fig1", "initial_state": {"bloch": [1.0, 1.0, 0.0]}}"#,
            r#"{"scenario": "openloop", "measurement": [1.0, 1.0]}"#,
            r#"{"scenario": "openloop", "measurement": [-1.0, 0.0, 1.0], "initial_state": {"bloch": [0, 0, 1]}}"#,
        ] {
            let err = ExperimentConfig::from_json(text).unwrap().resolve().unwrap_err();
            assert_eq!(err.exit_code(), 1, "{text}: {err}");
        }
    }
}
