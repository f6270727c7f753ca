//! Lyapunov certificates, Markov generators in reduced coordinates, reduced
//! SDE oracles and exponential-decay verdicts.
//!
//! Reduced coordinates:
//! * open loop: `xi_l = sqrt(tr(rho rho_l))`, which obeys
//!   `dxi_l = -(eta/2)(lambda_l - w)^2 xi_l dt + sqrt(eta)(lambda_l - w) xi_l dW`
//!   with `w = sum_l lambda_l xi_l^2`;
//! * adaptive qubit feedback: `(x, y, xi)` with `xi = sqrt(1 - z)`.
//!
//! The generator of an Itô diffusion `ds = mu dt + sigma dW` acts on a
//! smooth `V` as `AV = mu . grad V + (1/2) sigma^T Hess V sigma`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::control::{Controller, Target};
use crate::error::{Error, Result};
use crate::qop::{
    bloch_unchecked, populations_unchecked, trace_of_product, BlochVector, CMatrix, DensityMatrix, QndSpectrum,
};
use crate::rng::NoiseStream;
use crate::sme::{EnsembleStats, SimParams, Simulation, TrajectoryRecord, DIVERGENCE_THRESHOLD};

/// Statistical multiplier on the standard error in bound verdicts.
pub const SEM_FACTOR: f64 = 3.0;
/// Relative systematic allowance in bound verdicts.
pub const SYSTEMATIC_TOL: f64 = 0.02;
/// Relative systematic allowance in p-stability verdicts.
pub const P_STABILITY_TOL: f64 = 0.05;
/// Tolerance on reduced-state constraints.
pub const REDUCED_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    /// `E V_t <= exp(-r t) V_0`.
    Inequality,
    /// `E V_t = exp(-r t) V_0`.
    Equality,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LyapunovKind {
    /// `V = sum_{l < l'} sqrt(tr(rho rho_l) tr(rho rho_l'))`.
    OpenLoopQnd { spectrum: QndSpectrum },
    /// `V = 1 - tr(rho rho_bar)`.
    StaticOutputTarget { target: DensityMatrix },
    /// `V = sqrt(1 -+ tr(rho sigma_z))`.
    AdaptiveQnd { target: Target },
}

/// A Lyapunov function together with its certified decay rate.
#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovSpec {
    kind: LyapunovKind,
    rate: f64,
    bound: BoundKind,
}

impl LyapunovSpec {
    /// Open loop: `r = (eta / 2) min_{l != l'} (lambda_l - lambda_l')^2`.
    pub fn open_loop(spectrum: &QndSpectrum, eta: f64) -> Result<Self> {
        check_eta(eta)?;
        Ok(Self {
            rate: 0.5 * eta * spectrum.min_gap_squared(),
            kind: LyapunovKind::OpenLoopQnd {
                spectrum: spectrum.clone(),
            },
            bound: BoundKind::Inequality,
        })
    }

    /// Constant-gain output feedback: `r = gamma sin^2(theta_bar)`, with equality.
    pub fn static_output(controller: &Controller, gamma: f64) -> Result<Self> {
        let Controller::StaticOutput { theta_bar, .. } = *controller else {
            return Err(Error::InvalidController(
                "static-output certificate needs a StaticOutput controller".into(),
            ));
        };
        check_gamma(gamma)?;
        Ok(Self {
            kind: LyapunovKind::StaticOutputTarget {
                target: controller.target_state()?,
            },
            rate: gamma * theta_bar.sin().powi(2),
            bound: BoundKind::Equality,
        })
    }

    /// Adaptive feedback: `r = eta gamma / 4`.
    pub fn adaptive(target: Target, eta: f64, gamma: f64) -> Result<Self> {
        check_eta(eta)?;
        check_gamma(gamma)?;
        Ok(Self {
            kind: LyapunovKind::AdaptiveQnd { target },
            rate: 0.25 * eta * gamma,
            bound: BoundKind::Inequality,
        })
    }

    /// The certificate matching `controller`, or `None` when no rate applies.
    pub fn for_controller(controller: &Controller, spectrum: &QndSpectrum, params: &SimParams) -> Result<Option<Self>> {
        match *controller {
            Controller::Null => Self::open_loop(spectrum, params.eta).map(Some),
            Controller::StaticOutput { .. } => Self::static_output(controller, params.gamma).map(Some),
            Controller::AdaptiveQnd { target } => Self::adaptive(target, params.eta, params.gamma).map(Some),
            Controller::SmoothState { .. } => Ok(None),
        }
    }

    pub fn kind(&self) -> &LyapunovKind {
        &self.kind
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn bound_kind(&self) -> BoundKind {
        self.bound
    }

    fn dim(&self) -> usize {
        match &self.kind {
            LyapunovKind::OpenLoopQnd { spectrum } => spectrum.dim(),
            _ => 2,
        }
    }

    pub fn value(&self, rho: &DensityMatrix) -> Result<f64> {
        if rho.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: rho.dim(),
            });
        }
        Ok(self.value_unchecked(rho.matrix()))
    }

    /// `V` of a Hermitian, unit-trace matrix, not necessarily positive.
    pub(crate) fn value_unchecked(&self, rho: &CMatrix) -> f64 {
        match &self.kind {
            LyapunovKind::OpenLoopQnd { spectrum } => {
                let xi: Vec<f64> = populations_unchecked(spectrum.eigenvectors(), rho)
                    .into_iter()
                    .map(|p| p.max(0.0).sqrt())
                    .collect();
                pair_sum(&xi)
            }
            LyapunovKind::StaticOutputTarget { target } => (1.0 - trace_of_product(rho, target.matrix()).re).max(0.0),
            LyapunovKind::AdaptiveQnd { target } => {
                let z = bloch_unchecked(rho).z;
                match target {
                    Target::Excited => (1.0 - z).max(0.0).sqrt(),
                    Target::Ground => (1.0 + z).max(0.0).sqrt(),
                }
            }
        }
    }

    /// `V` in reduced coordinates: `xi` for open loop, `(x, y, xi)` for adaptive feedback.
    pub fn value_reduced(&self, state: &ReducedState) -> Result<f64> {
        match (&self.kind, state) {
            (LyapunovKind::OpenLoopQnd { spectrum }, ReducedState::Xi(xi)) => {
                if xi.len() != spectrum.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: spectrum.dim(),
                        found: xi.len(),
                    });
                }
                Ok(pair_sum(xi))
            }
            (LyapunovKind::AdaptiveQnd { .. }, ReducedState::XYXi { xi, .. }) => Ok(*xi),
            _ => Err(Error::InvalidArgument(
                "reduced coordinates do not match the Lyapunov function".into(),
            )),
        }
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::InvalidParams(format!("eta = {eta} must lie in (0, 1]")));
    }
    Ok(())
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidParams(format!("gamma = {gamma} must be positive")));
    }
    Ok(())
}

/// `sum_{l < l'} a_l a_l'`.
fn pair_sum(a: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            total += a[i] * a[j];
        }
    }
    total
}

/// Reduced coordinates of a state.
#[derive(Debug, Clone, PartialEq)]
pub enum ReducedState {
    /// `xi_l >= 0`, `sum xi_l^2 = 1`.
    Xi(Vec<f64>),
    /// `x^2 + y^2 + (1 - xi^2)^2 <= 1`, `xi >= 0`.
    XYXi { x: f64, y: f64, xi: f64 },
}

impl ReducedState {
    pub fn xi(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidArgument("need at least two levels".into()));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= -REDUCED_TOL)) {
            return Err(Error::InvalidState("xi components must be non-negative".into()));
        }
        let norm: f64 = values.iter().map(|v| v * v).sum();
        if (norm - 1.0).abs() > REDUCED_TOL {
            return Err(Error::InvalidState(format!("sum of xi^2 is {norm}, expected 1")));
        }
        Ok(ReducedState::Xi(values))
    }

    pub fn xyxi(x: f64, y: f64, xi: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && xi.is_finite()) || xi < -REDUCED_TOL {
            return Err(Error::InvalidState("xi must be finite and non-negative".into()));
        }
        let z = 1.0 - xi * xi;
        let r2 = x * x + y * y + z * z;
        if r2 > 1.0 + REDUCED_TOL {
            return Err(Error::InvalidState(format!(
                "(x, y, xi) maps outside the Bloch ball (|r|^2 = {r2})"
            )));
        }
        Ok(ReducedState::XYXi { x, y, xi })
    }

    /// `xi_l = sqrt(tr(rho rho_l))`.
    pub fn from_density(rho: &DensityMatrix, spectrum: &QndSpectrum) -> Result<Self> {
        let pops = spectrum.populations(rho)?;
        Ok(ReducedState::Xi(pops.into_iter().map(|p| p.max(0.0).sqrt()).collect()))
    }

    /// `(x, y, sqrt(1 - z))` for the excited target and the mirrored chart
    /// `(x, -y, sqrt(1 + z))` for the ground target.
    pub fn from_bloch(b: &BlochVector, target: Target) -> Self {
        match target {
            Target::Excited => ReducedState::XYXi {
                x: b.x,
                y: b.y,
                xi: (1.0 - b.z).max(0.0).sqrt(),
            },
            Target::Ground => ReducedState::XYXi {
                x: b.x,
                y: -b.y,
                xi: (1.0 + b.z).max(0.0).sqrt(),
            },
        }
    }

    /// Coordinates as a flat vector.
    pub fn coordinates(&self) -> Vec<f64> {
        match self {
            ReducedState::Xi(xi) => xi.clone(),
            ReducedState::XYXi { x, y, xi } => vec![*x, *y, *xi],
        }
    }

    /// Euclidean norm of the coordinates.
    pub fn norm(&self) -> f64 {
        self.coordinates().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Closed-form open-loop generator
/// `AV = -(eta/2) sum_{l < l'} (lambda_l - lambda_l')^2 xi_l xi_l'`.
pub fn generator_openloop_xi(state: &ReducedState, eigenvalues: &[f64], eta: f64) -> Result<f64> {
    let xi = expect_xi(state, eigenvalues.len())?;
    let mut total = 0.0;
    for i in 0..xi.len() {
        for j in i + 1..xi.len() {
            let gap = eigenvalues[i] - eigenvalues[j];
            total += gap * gap * xi[i] * xi[j];
        }
    }
    Ok(-0.5 * eta * total)
}

/// Closed-form adaptive-feedback generator
/// `AV = -(eta gamma / 2)(1/2 + (3/2) z^2 + x^2 / 2) xi` with `z = 1 - xi^2`.
pub fn generator_adaptive_xyxi(state: &ReducedState, eta: f64, gamma: f64) -> Result<f64> {
    let (x, _, xi) = expect_xyxi(state)?;
    let z = 1.0 - xi * xi;
    Ok(-0.5 * eta * gamma * (0.5 + 1.5 * z * z + 0.5 * x * x) * xi)
}

fn expect_xi(state: &ReducedState, n: usize) -> Result<&[f64]> {
    match state {
        ReducedState::Xi(xi) if xi.len() == n => Ok(xi),
        ReducedState::Xi(xi) => Err(Error::DimensionMismatch {
            expected: n,
            found: xi.len(),
        }),
        _ => Err(Error::InvalidArgument("expected xi coordinates".into())),
    }
}

fn expect_xyxi(state: &ReducedState) -> Result<(f64, f64, f64)> {
    match *state {
        ReducedState::XYXi { x, y, xi } => Ok((x, y, xi)),
        _ => Err(Error::InvalidArgument("expected (x, y, xi) coordinates".into())),
    }
}

/// Drift and diffusion of the open-loop `xi` system.
pub fn xi_sde_coefficients(xi: &[f64], eigenvalues: &[f64], eta: f64) -> (Vec<f64>, Vec<f64>) {
    let w: f64 = xi.iter().zip(eigenvalues).map(|(x, l)| l * x * x).sum();
    let se = eta.sqrt();
    xi.iter()
        .zip(eigenvalues)
        .map(|(x, l)| {
            let d = l - w;
            (-0.5 * eta * d * d * x, se * d * x)
        })
        .unzip()
}

/// Drift and diffusion of `(x, y, xi)` under the adaptive feedback with
/// `L = sqrt(gamma/2) sigma_z` and excited target.
pub fn xyxi_sde_coefficients(s: [f64; 3], eta: f64, gamma: f64) -> ([f64; 3], [f64; 3]) {
    let [x, y, xi] = s;
    let eg = eta * gamma;
    let xi2 = xi * xi;
    let z = 1.0 - xi2;
    let b = 1.0 + z - x; // (2 - xi^2) - x
    let mu = [
        -gamma * x - eg * xi2 * xi2 * x - eg * (1.0 + z) * xi2 * z + 2.0 * eg * xi2,
        -gamma * y,
        0.5 * eg * xi * (xi2 * z - (1.0 + z) * x - 0.5 * b * b),
    ];
    let root = (2.0 * eg).sqrt();
    let sigma = [root * z * (xi2 - x), -root * z * y, -(0.5 * eg).sqrt() * b * xi];
    (mu, sigma)
}

/// Generator `mu . grad V + (1/2) sigma^T Hess V sigma` of a scalar Itô
/// diffusion, by central differences along `mu` and `sigma` with one
/// Richardson extrapolation.
pub fn fd_generator(v: &dyn Fn(&[f64]) -> f64, s: &[f64], mu: &[f64], sigma: &[f64], h: f64) -> f64 {
    let shifted = |dir: &[f64], t: f64| -> f64 {
        let p: Vec<f64> = s.iter().zip(dir).map(|(a, d)| a + t * d).collect();
        v(&p)
    };
    let v0 = v(s);
    let first = |h: f64| (shifted(mu, h) - shifted(mu, -h)) / (2.0 * h);
    let second = |h: f64| (shifted(sigma, h) - 2.0 * v0 + shifted(sigma, -h)) / (h * h);
    let d1 = (4.0 * first(0.5 * h) - first(h)) / 3.0;
    let d2 = (4.0 * second(0.5 * h) - second(h)) / 3.0;
    d1 + 0.5 * d2
}

/// Generator of `spec` at `rho` under the full closed-loop SME, by finite
/// differences along its drift and diffusion matrices.
pub fn full_generator_fd(sim: &Simulation, rho: &DensityMatrix, spec: &LyapunovSpec, h: f64) -> Result<f64> {
    let (drift, diffusion) = sim.sde_coefficients(rho)?;
    let r = rho.matrix();
    let v = |dir: &CMatrix, t: f64| spec.value_unchecked(&(r + dir * crate::qop::C64::new(t, 0.0)));
    let v0 = spec.value_unchecked(r);
    let first = |h: f64| (v(&drift, h) - v(&drift, -h)) / (2.0 * h);
    let second = |h: f64| (v(&diffusion, h) - 2.0 * v0 + v(&diffusion, -h)) / (h * h);
    let d1 = (4.0 * first(0.5 * h) - first(h)) / 3.0;
    let d2 = (4.0 * second(0.5 * h) - second(h)) / 3.0;
    Ok(d1 + 0.5 * d2)
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReducedSystem {
    /// Open-loop `xi` system for the given measurement eigenvalues.
    Lemma1Xi { eigenvalues: Vec<f64> },
    /// `(x, y, xi)` system of the adaptive qubit feedback, excited target.
    Theorem1XYXi,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReducedTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<ReducedState>,
}

/// Euler–Maruyama on a reduced SDE. Trajectory `index` consumes the same
/// increments as `Simulation::run_trajectory` with the same seed and `dt`.
pub fn simulate_reduced(
    system: &ReducedSystem,
    initial: &ReducedState,
    params: &SimParams,
    index: u64,
    stride: usize,
) -> Result<ReducedTrajectory> {
    params.validate()?;
    let stride = stride.max(1);
    let mut s = match (system, initial) {
        (ReducedSystem::Lemma1Xi { eigenvalues }, ReducedState::Xi(xi)) => {
            if xi.len() != eigenvalues.len() {
                return Err(Error::DimensionMismatch {
                    expected: eigenvalues.len(),
                    found: xi.len(),
                });
            }
            xi.clone()
        }
        (ReducedSystem::Theorem1XYXi, ReducedState::XYXi { x, y, xi }) => vec![*x, *y, *xi],
        _ => {
            return Err(Error::InvalidArgument(
                "initial state does not match the reduced system".into(),
            ))
        }
    };
    let wrap = |s: &[f64]| match system {
        ReducedSystem::Lemma1Xi { .. } => ReducedState::Xi(s.to_vec()),
        ReducedSystem::Theorem1XYXi => ReducedState::XYXi {
            x: s[0],
            y: s[1],
            xi: s[2],
        },
    };
    let n_steps = params.n_steps();
    let mut noise = NoiseStream::new(params.seed, index, params.dt);
    let mut out = ReducedTrajectory {
        times: vec![0.0],
        states: vec![wrap(&s)],
    };
    for k in 1..=n_steps {
        let dw = noise.next_increment();
        let t = k as f64 * params.dt;
        match system {
            ReducedSystem::Lemma1Xi { eigenvalues } => {
                let (mu, sigma) = xi_sde_coefficients(&s, eigenvalues, params.eta);
                for i in 0..s.len() {
                    s[i] += mu[i] * params.dt + sigma[i] * dw;
                }
                project_xi(&mut s, t)?;
            }
            ReducedSystem::Theorem1XYXi => {
                let (mu, sigma) = xyxi_sde_coefficients([s[0], s[1], s[2]], params.eta, params.gamma);
                for i in 0..3 {
                    s[i] += mu[i] * params.dt + sigma[i] * dw;
                }
                project_xyxi(&mut s, t)?;
            }
        }
        if k % stride == 0 || k == n_steps {
            out.times.push(t);
            out.states.push(wrap(&s));
        }
    }
    Ok(out)
}

fn diverged(time: f64, value: f64) -> Error {
    Error::IntegratorDiverged {
        time,
        min_eigenvalue: value,
    }
}

/// Clips to the non-negative orthant and renormalizes onto the unit sphere.
fn project_xi(s: &mut [f64], t: f64) -> Result<()> {
    let lowest = s.iter().copied().fold(f64::INFINITY, f64::min);
    if !(lowest >= DIVERGENCE_THRESHOLD) {
        return Err(diverged(t, lowest));
    }
    s.iter_mut().for_each(|v| *v = v.max(0.0));
    let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
    s.iter_mut().for_each(|v| *v /= norm);
    Ok(())
}

/// Clips `xi >= 0` and pulls the Bloch vector back into the unit ball.
fn project_xyxi(s: &mut [f64], t: f64) -> Result<()> {
    if !(s[2] >= DIVERGENCE_THRESHOLD) || s.iter().any(|v| !v.is_finite()) {
        return Err(diverged(t, s[2]));
    }
    s[2] = s[2].max(0.0);
    let z = 1.0 - s[2] * s[2];
    let r = (s[0] * s[0] + s[1] * s[1] + z * z).sqrt();
    if r > 1.0 + 0.05 {
        return Err(diverged(t, 1.0 - r));
    }
    if r > 1.0 {
        s[0] /= r;
        s[1] /= r;
        s[2] = (1.0 - z / r).max(0.0).sqrt();
    }
    Ok(())
}

/// Monte Carlo estimate of a generator with a two-sided confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeneratorEstimate {
    pub estimate: f64,
    pub sem: f64,
    pub lower: f64,
    pub upper: f64,
    pub delta: f64,
    pub n_samples: usize,
}

impl GeneratorEstimate {
    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }
}

/// Number of integration steps in the generator horizon `delta`.
pub const GENERATOR_SUBSTEPS: usize = 10;

/// Estimates `AV(rho)` as `(E V(rho_delta) - V(rho)) / delta` with
/// `delta = 10 dt` from `n_samples` paths.
///
/// Paths come in antithetic pairs (`dW`, `-dW`). The Wiener displacement
/// over `delta` of pair `i` is drawn from the `i`-th of `n_samples / 2`
/// equiprobable strata and the intermediate increments from the Brownian
/// bridge. The standard error is computed as for independent pairs, which
/// overstates the error of a stratified sample, so `estimate +- 2 SEM` is a
/// conservative interval.
pub fn mc_generator_estimate(
    sim: &Simulation,
    rho: &DensityMatrix,
    spec: &LyapunovSpec,
    n_samples: usize,
) -> Result<GeneratorEstimate> {
    if n_samples < 2 {
        return Err(Error::InvalidArgument("need at least two samples".into()));
    }
    let p = sim.params();
    let delta = GENERATOR_SUBSTEPS as f64 * p.dt;
    let v0 = spec.value(rho)?;
    let pairs = n_samples / 2;
    let normal = Normal::standard();
    let samples = (0..pairs as u64)
        .into_par_iter()
        .map(|index| {
            let mut noise = NoiseStream::new(p.seed, index, p.dt);
            let u = (index as f64 + noise.next_uniform().max(f64::EPSILON)) / pairs as f64;
            let displacement = delta.sqrt() * normal.inverse_cdf(u.min(1.0 - f64::EPSILON));
            let raw: Vec<f64> = (0..GENERATOR_SUBSTEPS).map(|_| noise.next_increment()).collect();
            let shift = (displacement - raw.iter().sum::<f64>()) / GENERATOR_SUBSTEPS as f64;
            let increments: Vec<f64> = raw.iter().map(|g| g + shift).collect();
            let mut it = increments.iter();
            let plus = sim.evolve(rho, GENERATOR_SUBSTEPS, || *it.next().unwrap())?;
            let mut it = increments.iter();
            let minus = sim.evolve(rho, GENERATOR_SUBSTEPS, || -*it.next().unwrap())?;
            let v = 0.5 * (spec.value_unchecked(plus.matrix()) + spec.value_unchecked(minus.matrix()));
            Ok([(v - v0) / delta])
        })
        .collect::<Result<Vec<[f64; 1]>>>()?;
    let stats = crate::sme::SeriesStats::from_samples(&samples);
    let estimate = stats.mean[0];
    let sem = stats.sem_at(0);
    Ok(GeneratorEstimate {
        estimate,
        sem,
        lower: estimate - 2.0 * sem,
        upper: estimate + 2.0 * sem,
        delta,
        n_samples: 2 * pairs,
    })
}

/// Outcome of a decay-bound check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub pass: bool,
    /// Smallest value of `allowed - observed` over samples; negative on failure.
    pub worst_margin: f64,
    pub worst_time: f64,
    pub rate: f64,
    pub kind: BoundKind,
    pub v0: f64,
    pub samples_checked: usize,
}

/// Checks a sampled mean `V` against `exp(-rate t) v0` with the
/// `3 SEM + 2%` protocol, over samples with `t <= horizon`.
pub fn check_decay(
    times: &[f64],
    mean: &[f64],
    sem: Option<&[f64]>,
    rate: f64,
    kind: BoundKind,
    v0: f64,
    horizon: f64,
) -> Verdict {
    let mut worst_margin = f64::INFINITY;
    let mut worst_time = 0.0;
    let mut checked = 0;
    for (k, (&t, &m)) in times.iter().zip(mean).enumerate() {
        if t > horizon {
            continue;
        }
        checked += 1;
        let bound = (-rate * t).exp() * v0;
        let stat = SEM_FACTOR * sem.map_or(0.0, |s| s[k]);
        let margin = match kind {
            BoundKind::Inequality => bound * (1.0 + SYSTEMATIC_TOL) + stat - m,
            BoundKind::Equality => stat + SYSTEMATIC_TOL * bound - (m - bound).abs(),
        };
        if !(margin >= worst_margin) {
            worst_margin = margin;
            worst_time = t;
        }
    }
    Verdict {
        pass: checked > 0 && worst_margin >= 0.0,
        worst_margin,
        worst_time,
        rate,
        kind,
        v0,
        samples_checked: checked,
    }
}

/// Checks the monitored Lyapunov mean of an ensemble against the
/// certificate's rate at every sampled time.
pub fn check_exponential_bound(stats: &EnsembleStats, spec: &LyapunovSpec, v0: f64) -> Result<Verdict> {
    let series = stats
        .lyapunov
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("ensemble carries no Lyapunov monitor".into()))?;
    Ok(check_decay(
        &stats.times,
        &series.mean,
        series.sem.as_deref(),
        spec.rate(),
        spec.bound_kind(),
        v0,
        f64::INFINITY,
    ))
}

/// Constant in `E|s_t| <= C |s_0| exp(-r t)` from the sandwich
/// `|s| / sqrt(3) <= V <= |s|` of the adaptive certificate.
pub const P_STABILITY_CONSTANT: f64 = 1.732_050_807_568_877_2;

/// Exponential 1-stability check of `(x, y, xi)` for trajectories sharing
/// one initial state, under the adaptive feedback with rate `eta gamma / 4`.
pub fn check_p_stability(
    trajectories: &[TrajectoryRecord],
    p: f64,
    target: Target,
    eta: f64,
    gamma: f64,
) -> Result<Verdict> {
    if p != 1.0 {
        return Err(Error::InvalidArgument(format!("only p = 1 is certified, got p = {p}")));
    }
    let first = trajectories
        .first()
        .ok_or_else(|| Error::InvalidArgument("no trajectories".into()))?;
    if first.bloch.is_empty() {
        return Err(Error::NotQubit(first.populations.first().map_or(0, Vec::len)));
    }
    let rows: Vec<Vec<f64>> = trajectories
        .iter()
        .map(|r| {
            r.bloch
                .iter()
                .map(|b| ReducedState::from_bloch(b, target).norm())
                .collect()
        })
        .collect();
    let stats = crate::sme::SeriesStats::from_samples(&rows);
    let rate = LyapunovSpec::adaptive(target, eta, gamma)?.rate();
    let s0 = stats.mean[0];
    let mut worst_margin = f64::INFINITY;
    let mut worst_time = 0.0;
    for (k, &t) in first.times.iter().enumerate() {
        let allowed =
            P_STABILITY_CONSTANT * s0 * (-rate * t).exp() * (1.0 + P_STABILITY_TOL) + SEM_FACTOR * stats.sem_at(k);
        let margin = allowed - stats.mean[k];
        if margin < worst_margin {
            worst_margin = margin;
            worst_time = t;
        }
    }
    Ok(Verdict {
        pass: worst_margin >= 0.0,
        worst_margin,
        worst_time,
        rate,
        kind: BoundKind::Inequality,
        v0: s0,
        samples_checked: first.times.len(),
    })
}

/// Outcome of one generator cross-check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleCheck {
    pub name: String,
    pub pass: bool,
    /// Largest absolute deviation for finite differences, largest `|z|`
    /// score for Monte Carlo.
    pub worst: f64,
    pub points: usize,
}

/// Settings of [`oracle_cross_checks`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleSettings {
    pub fd_points: usize,
    pub mc_states: usize,
    pub mc_samples: usize,
    pub eta: f64,
    pub seed: u64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self {
            fd_points: 1000,
            mc_states: 20,
            mc_samples: 20_000,
            eta: 0.5,
            seed: 0,
        }
    }
}

/// Absolute tolerance of the closed-form generators against finite differences.
pub const ORACLE_FD_TOL: f64 = 1e-6;

/// Cross-checks the closed-form generators against finite differences on
/// the reduced and full coordinates and against Monte Carlo estimates.
///
/// Adaptive feedback is sampled uniformly on the Bloch ball outside radius
/// `1e-3` of the target; open loop on Ginibre states of a qutrit with
/// eigenvalues `(-1, 0.3, 1)`.
pub fn oracle_cross_checks(settings: &OracleSettings) -> Result<Vec<OracleCheck>> {
    use crate::qop::HermitianOperator;
    use crate::sme::QndSystem;
    use rand::{Rng, SeedableRng};

    let eta = settings.eta;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(settings.seed);
    let params = SimParams {
        dt: 1e-4,
        eta,
        seed: settings.seed,
        ..SimParams::default()
    };
    let adaptive = Simulation::new(
        QndSystem::qubit(params.gamma)?,
        Controller::AdaptiveQnd {
            target: Target::Excited,
        },
        params.clone(),
    )?;
    let spec = LyapunovSpec::adaptive(Target::Excited, eta, params.gamma)?;
    let lambdas = [-1.0, 0.3, 1.0];
    let system = QndSystem::new(HermitianOperator::diagonal(&lambdas)?)?;
    let spectrum = system.spectrum().clone();
    let open = Simulation::new(system, Controller::Null, params.clone())?;
    let spec_open = LyapunovSpec::open_loop(&spectrum, eta)?;

    let bloch = |rng: &mut rand_chacha::ChaCha8Rng| loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        if v.iter().map(|a| a * a).sum::<f64>() > 1.0 {
            continue;
        }
        let xi = (1.0 - v[2]).sqrt();
        if (v[0] * v[0] + v[1] * v[1] + xi * xi).sqrt() >= 1e-3 {
            return [v[0], v[1], xi];
        }
    };
    let ginibre = |rng: &mut rand_chacha::ChaCha8Rng| -> Result<DensityMatrix> {
        let g = CMatrix::from_fn(3, 3, |_, _| {
            crate::qop::C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        let m = &g * g.adjoint();
        let tr = m.trace();
        DensityMatrix::new(m / tr)
    };
    let adaptive_exact = |s: [f64; 3]| {
        generator_adaptive_xyxi(
            &ReducedState::XYXi {
                x: s[0],
                y: s[1],
                xi: s[2],
            },
            eta,
            params.gamma,
        )
    };
    let to_density = |s: [f64; 3]| crate::qop::from_bloch(&BlochVector::new(s[0], s[1], 1.0 - s[2] * s[2])?);

    let mut out = Vec::new();
    let mut fd_check = |name: &str, worst: f64| {
        out.push(OracleCheck {
            name: name.into(),
            pass: worst <= ORACLE_FD_TOL,
            worst,
            points: settings.fd_points,
        })
    };

    let mut worst = 0.0f64;
    for _ in 0..settings.fd_points {
        let s = bloch(&mut rng);
        let (mu, sigma) = xyxi_sde_coefficients(s, eta, params.gamma);
        let fd = fd_generator(&|p: &[f64]| p[2].max(0.0), &s, &mu, &sigma, 1e-3);
        worst = worst.max((fd - adaptive_exact(s)?).abs());
    }
    fd_check("adaptive reduced FD", worst);

    let mut worst = 0.0f64;
    for _ in 0..settings.fd_points {
        let s = bloch(&mut rng);
        let fd = full_generator_fd(&adaptive, &to_density(s)?, &spec, 1e-4)?;
        worst = worst.max((fd - adaptive_exact(s)?).abs());
    }
    fd_check("adaptive full-SME FD", worst);

    let v_open = |p: &[f64]| pair_sum(p);
    let mut worst = 0.0f64;
    for _ in 0..settings.fd_points {
        let rho = ginibre(&mut rng)?;
        let state = ReducedState::from_density(&rho, &spectrum)?;
        let xi = state.coordinates();
        let (mu, sigma) = xi_sde_coefficients(&xi, &lambdas, eta);
        let fd = fd_generator(&v_open, &xi, &mu, &sigma, 1e-3);
        worst = worst.max((fd - generator_openloop_xi(&state, &lambdas, eta)?).abs());
    }
    fd_check("open-loop reduced FD", worst);

    let mut worst = 0.0f64;
    for _ in 0..settings.fd_points {
        let rho = ginibre(&mut rng)?;
        let fd = full_generator_fd(&open, &rho, &spec_open, 1e-4)?;
        let exact = generator_openloop_xi(&ReducedState::from_density(&rho, &spectrum)?, &lambdas, eta)?;
        worst = worst.max((fd - exact).abs());
    }
    fd_check("open-loop full-SME FD", worst);

    if settings.mc_states > 0 {
        let mut mc_check = |name: &str, scores: Vec<(bool, f64)>| {
            out.push(OracleCheck {
                name: name.into(),
                pass: scores.iter().all(|s| s.0),
                worst: scores.iter().map(|s| s.1).fold(0.0, f64::max),
                points: scores.len(),
            })
        };
        let mut scores = Vec::new();
        for _ in 0..settings.mc_states {
            let s = bloch(&mut rng);
            let est = mc_generator_estimate(&adaptive, &to_density(s)?, &spec, settings.mc_samples)?;
            let exact = adaptive_exact(s)?;
            scores.push((est.contains(exact), (est.estimate - exact).abs() / est.sem));
        }
        mc_check("adaptive Monte Carlo", scores);
        let mut scores = Vec::new();
        for _ in 0..settings.mc_states {
            let rho = ginibre(&mut rng)?;
            let est = mc_generator_estimate(&open, &rho, &spec_open, settings.mc_samples)?;
            let exact = generator_openloop_xi(&ReducedState::from_density(&rho, &spectrum)?, &lambdas, eta)?;
            scores.push((est.contains(exact), (est.estimate - exact).abs() / est.sem));
        }
        mc_check("open-loop Monte Carlo", scores);
    }
    Ok(out)
}
