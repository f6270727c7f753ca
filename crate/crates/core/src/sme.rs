//! Euler–Maruyama integration of the QND stochastic master equation in open
//! and closed loop, plus trajectory and ensemble runners.
//!
//! Two closed-loop steppers are provided. [`Stepper::Expanded`] integrates
//! the closed-loop SME
//!
//! ```text
//! drho = -i f [F, rho] dt - (i kappa sqrt(eta) / 2) [FL + LF, rho] dt
//!        + D(L - i kappa sqrt(eta) F, rho) dt + D(i kappa sqrt(1 - eta) F, rho) dt
//!        + sqrt(eta) M(L, rho) dW - i kappa [F, rho] dW
//! ```
//!
//! rewritten in generator form `A rho + rho A^dag + sum_k C_k rho C_k^dag` for
//! the drift and `M(J, rho)` for the diffusion with `J = sqrt(eta) L - i kappa F`.
//! [`Stepper::Propagator`] instead conjugates the open-loop increment by
//! `exp(-i F u dt)`, `u dt = f dt + kappa dY`, expanded to second order with
//! the Itô table. After every step the state is projected back onto the set
//! of density matrices.

use nalgebra::SMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::LyapunovSpec;
use crate::control::Controller;
use crate::error::{Error, Result};
use crate::qop::{
    backaction_unchecked, bloch_unchecked, dissipator_unchecked, hermitian_eigen, lowering, min_eigenvalue,
    populations_unchecked, qnd_spectrum, trace, BlochVector, CMatrix, DensityMatrix, HermitianOperator, QndSpectrum,
    C64,
};
use crate::rng::NoiseStream;

/// Eigenvalues below this before projection abort the integration.
pub const DIVERGENCE_THRESHOLD: f64 = -0.05;
/// Default number of steps between recorded samples.
pub const DEFAULT_STRIDE: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimParams {
    /// Time step, in units of `1 / gamma` when `gamma = 1`.
    pub dt: f64,
    pub t_final: f64,
    /// Detection efficiency in `(0, 1]`.
    pub eta: f64,
    /// Measurement strength; the qubit measurement operator is `sqrt(gamma/2) sigma_z`.
    pub gamma: f64,
    /// Rate of the unmonitored decay channel `(gamma_dec / 2) D(|g><e|, rho)`.
    pub gamma_dec: f64,
    pub seed: u64,
    pub n_traj: usize,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            dt: 1e-4,
            t_final: 1.0,
            eta: 1.0,
            gamma: 1.0,
            gamma_dec: 0.0,
            seed: 0,
            n_traj: 1,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidParams(msg));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return fail(format!("dt = {} must be positive", self.dt));
        }
        if !(self.t_final >= self.dt && self.t_final.is_finite()) {
            return fail(format!("t_final = {} must be at least dt = {}", self.t_final, self.dt));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return fail(format!("eta = {} must lie in (0, 1]", self.eta));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return fail(format!("gamma = {} must be positive", self.gamma));
        }
        if !(self.gamma_dec >= 0.0 && self.gamma_dec.is_finite()) {
            return fail(format!("gamma_dec = {} must be non-negative", self.gamma_dec));
        }
        if self.n_traj == 0 {
            return fail("n_traj must be at least 1".into());
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        ((self.t_final / self.dt).round() as usize).max(1)
    }
}

/// Measurement operator together with its eigen-decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct QndSystem {
    measurement: HermitianOperator,
    spectrum: QndSpectrum,
}

impl QndSystem {
    pub fn new(measurement: HermitianOperator) -> Result<Self> {
        let spectrum = qnd_spectrum(&measurement)?;
        Ok(Self { measurement, spectrum })
    }

    /// The qubit with `L = sqrt(gamma / 2) sigma_z`.
    pub fn qubit(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidParams(format!("gamma = {gamma} must be positive")));
        }
        Self::new(HermitianOperator::qubit_measurement(gamma))
    }

    pub fn measurement(&self) -> &HermitianOperator {
        &self.measurement
    }

    pub fn spectrum(&self) -> &QndSpectrum {
        &self.spectrum
    }

    pub fn dim(&self) -> usize {
        self.measurement.dim()
    }
}

/// Result of a single integration step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub state: DensityMatrix,
    /// Measurement increment `dY`, computed from the pre-step state.
    pub dy: f64,
    /// Smallest eigenvalue of the raw update before projection, zero when
    /// no clipping was needed.
    pub min_eigenvalue: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stepper {
    #[default]
    Expanded,
    Propagator,
}

const HALF: C64 = C64::new(0.5, 0.0);
const MINUS_I: C64 = C64::new(0.0, -1.0);

/// Constant operator data shared by every step of a run.
#[derive(Debug, Clone)]
struct Operators {
    n: usize,
    eta: f64,
    sqrt_eta: f64,
    gamma_dec: f64,
    l: CMatrix,
    l_sq: CMatrix,
    f: CMatrix,
    f_sq: CMatrix,
    /// FL + LF
    f_anti_l: CMatrix,
    /// i [F, L]
    i_comm_fl: CMatrix,
}

impl Operators {
    fn new(l: &HermitianOperator, actuator: Option<&HermitianOperator>, params: &SimParams) -> Result<Self> {
        let n = l.dim();
        if params.gamma_dec > 0.0 && n != 2 {
            return Err(Error::NotQubit(n));
        }
        let l = l.matrix().clone();
        let f = match actuator {
            Some(a) => {
                if a.dim() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        found: a.dim(),
                    });
                }
                a.matrix().clone()
            }
            None => CMatrix::zeros(n, n),
        };
        let fl = &f * &l;
        let lf = &l * &f;
        Ok(Self {
            n,
            eta: params.eta,
            sqrt_eta: params.eta.sqrt(),
            gamma_dec: params.gamma_dec,
            l_sq: &l * &l,
            f_sq: &f * &f,
            f_anti_l: &fl + &lf,
            i_comm_fl: (fl - lf) * C64::new(0.0, 1.0),
            l,
            f,
        })
    }

    /// `sqrt(eta) tr(L rho + rho L) dt + dW`.
    #[inline]
    fn record_increment(&self, rho: &CMatrix, dt: f64, dw: f64) -> f64 {
        let n = self.n;
        let mut tr = 0.0;
        for i in 0..n {
            for k in 0..n {
                tr += (self.l[(i, k)] * rho[(k, i)]).re;
            }
        }
        2.0 * self.sqrt_eta * tr * dt + dw
    }
}

/// Scratch matrices for the expanded stepper.
#[derive(Debug, Clone)]
struct Workspace {
    a: CMatrix,
    c: CMatrix,
    j: CMatrix,
    t1: CMatrix,
    t2: CMatrix,
    t3: CMatrix,
    next: CMatrix,
}

impl Workspace {
    fn new(n: usize) -> Self {
        let z = CMatrix::zeros(n, n);
        Self {
            a: z.clone(),
            c: z.clone(),
            j: z.clone(),
            t1: z.clone(),
            t2: z.clone(),
            t3: z.clone(),
            next: z,
        }
    }
}

/// Writes the unprojected expanded-SME update of `rho` into `ws.next`.
fn expanded_update(ops: &Operators, ws: &mut Workspace, rho: &CMatrix, f: f64, kappa: f64, dt: f64, dw: f64) {
    let n = ops.n;
    let se = ops.sqrt_eta;
    let controlled = f != 0.0 || kappa != 0.0;
    let h_anti = 0.5 * kappa * se;
    let k_f = kappa * kappa;
    let k_comm = kappa * se;

    // A = -i H_eff - K / 2 with H_eff = f F + (kappa sqrt(eta) / 2)(FL + LF)
    // and K = L^2 + kappa^2 F^2 + kappa sqrt(eta) i[F, L] = C1^dag C1 + C2^dag C2.
    for idx in 0..n * n {
        let mut a = -HALF * ops.l_sq[idx];
        if controlled {
            let h = ops.f[idx] * f + ops.f_anti_l[idx] * h_anti;
            a += MINUS_I * h - HALF * (ops.f_sq[idx] * k_f + ops.i_comm_fl[idx] * k_comm);
        }
        ws.a[idx] = a;
        ws.c[idx] = ops.l[idx] + MINUS_I * ops.f[idx] * (kappa * se);
        ws.j[idx] = ops.l[idx] * se + MINUS_I * ops.f[idx] * kappa;
    }
    if ops.gamma_dec > 0.0 {
        ws.a[(0, 0)] -= C64::new(0.25 * ops.gamma_dec, 0.0);
    }

    // A rho + rho A^dag
    ws.a.mul_to(rho, &mut ws.t1);
    for i in 0..n {
        for k in 0..n {
            ws.next[(i, k)] = ws.t1[(i, k)] + ws.t1[(k, i)].conj();
        }
    }
    // C1 rho C1^dag with C1 = L - i kappa sqrt(eta) F
    ws.c.mul_to(rho, &mut ws.t1);
    ws.t1.adjoint_to(&mut ws.t3);
    ws.c.mul_to(&ws.t3, &mut ws.t2);
    ws.next += &ws.t2;
    // kappa^2 (1 - eta) F rho F
    let outer_f = k_f * (1.0 - ops.eta);
    if outer_f != 0.0 {
        ops.f.mul_to(rho, &mut ws.t1);
        ws.t1.adjoint_to(&mut ws.t3);
        ops.f.mul_to(&ws.t3, &mut ws.t2);
        for idx in 0..n * n {
            ws.next[idx] += ws.t2[idx] * outer_f;
        }
    }
    // (gamma_dec / 2) sigma_- rho sigma_+ = (gamma_dec / 2) rho_ee |g><g|
    if ops.gamma_dec > 0.0 {
        ws.next[(1, 1)] += rho[(0, 0)] * (0.5 * ops.gamma_dec);
    }

    // Diffusion M(J, rho) = J rho + rho J^dag - tr(J rho + rho J^dag) rho.
    ws.j.mul_to(rho, &mut ws.t1);
    let mut tr = 0.0;
    for i in 0..n {
        tr += 2.0 * ws.t1[(i, i)].re;
    }
    for i in 0..n {
        for k in 0..n {
            let diffusion = ws.t1[(i, k)] + ws.t1[(k, i)].conj() - rho[(i, k)] * tr;
            ws.next[(i, k)] = rho[(i, k)] + ws.next[(i, k)] * dt + diffusion * dw;
        }
    }
}

/// Unprojected propagator-form update.
fn propagator_update(ops: &Operators, rho: &CMatrix, f: f64, kappa: f64, dt: f64, dw: f64) -> CMatrix {
    // Open-loop increment X = rho + X_t dt + X_w dW.
    let mut x_t = dissipator_unchecked(&ops.l, rho);
    if ops.gamma_dec > 0.0 {
        x_t += decoherence_term(rho, ops.gamma_dec);
    }
    let x_w = backaction_unchecked(&ops.l, rho) * C64::new(ops.sqrt_eta, 0.0);

    // u dt = theta_t dt + theta_w dW, with dY = sqrt(eta) tr(L rho + rho L) dt + dW.
    let theta_t = f + kappa * (ops.record_increment(rho, 1.0, 0.0));
    let theta_w = kappa;

    // exp(-i F theta) X exp(i F theta) = X - i theta [F, X] - (theta^2 / 2) [F, [F, X]] + ...
    // Itô table: dW^2 = dt, dW dt = dt^2 = 0, so
    //   theta [F, X]     = theta_t [F, rho] dt + theta_w [F, rho] dW + theta_w [F, X_w] dt
    //   theta^2 [F, [F, X]] = theta_w^2 [F, [F, rho]] dt.
    let comm = |m: &CMatrix| &ops.f * m - m * &ops.f;
    let c_rho = comm(rho);
    let c_xw = comm(&x_w);
    let cc_rho = comm(&c_rho);

    let drift = x_t + (&c_rho * C64::new(theta_t, 0.0) + c_xw * C64::new(theta_w, 0.0)) * MINUS_I
        - cc_rho * C64::new(0.5 * theta_w * theta_w, 0.0);
    let diffusion = x_w + c_rho * (MINUS_I * theta_w);
    rho + drift * C64::new(dt, 0.0) + diffusion * C64::new(dw, 0.0)
}

fn decoherence_term(rho: &CMatrix, gamma_dec: f64) -> CMatrix {
    dissipator_unchecked(&lowering(), rho) * C64::new(0.5 * gamma_dec, 0.0)
}

/// Adds the spontaneous-emission term `(gamma_dec / 2) D(|g><e|, rho)` to a
/// drift matrix.
pub fn add_decoherence(drift: &CMatrix, rho: &DensityMatrix, gamma_dec: f64) -> Result<CMatrix> {
    if rho.dim() != 2 {
        return Err(Error::NotQubit(rho.dim()));
    }
    if drift.nrows() != 2 || drift.ncols() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            found: drift.nrows(),
        });
    }
    if !(gamma_dec >= 0.0) {
        return Err(Error::InvalidParams(format!(
            "gamma_dec = {gamma_dec} must be non-negative"
        )));
    }
    Ok(drift + decoherence_term(rho.matrix(), gamma_dec))
}

/// Re-Hermitizes, clips negative eigenvalues and renormalizes `m` in place.
/// Returns the smallest eigenvalue seen before clipping, or zero when the
/// matrix was already positive semidefinite.
pub(crate) fn project_in_place(m: &mut CMatrix, time: f64) -> Result<f64> {
    let n = m.nrows();
    if m.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::IntegratorDiverged {
            time,
            min_eigenvalue: f64::NAN,
        });
    }
    for i in 0..n {
        m[(i, i)].im = 0.0;
        for k in i + 1..n {
            let avg = (m[(i, k)] + m[(k, i)].conj()) * 0.5;
            m[(i, k)] = avg;
            m[(k, i)] = avg.conj();
        }
    }
    let lowest = min_eigenvalue(m);
    if lowest < DIVERGENCE_THRESHOLD {
        return Err(Error::IntegratorDiverged {
            time,
            min_eigenvalue: lowest,
        });
    }
    if lowest < 0.0 {
        if n == 2 {
            // rho = l+ P+ + l- P-, clipped and renormalized to P+ = (rho - l- I) / (l+ - l-).
            let highest = m[(0, 0)].re + m[(1, 1)].re - lowest;
            let scale = 1.0 / (highest - lowest);
            m[(0, 0)] -= C64::new(lowest, 0.0);
            m[(1, 1)] -= C64::new(lowest, 0.0);
            *m *= C64::new(scale, 0.0);
        } else {
            let (values, vectors) = hermitian_eigen(m);
            let mut clipped = CMatrix::zeros(n, n);
            for (j, &v) in values.iter().enumerate() {
                if v > 0.0 {
                    let col = vectors.column(j);
                    clipped += col * col.adjoint() * C64::new(v, 0.0);
                }
            }
            *m = clipped;
        }
    }
    let tr = trace(m).re;
    *m /= C64::new(tr, 0.0);
    Ok(lowest.min(0.0))
}

fn finish_step(mut next: CMatrix, dy: f64) -> Result<StepResult> {
    let min_eigenvalue = project_in_place(&mut next, f64::NAN)?;
    Ok(StepResult {
        state: DensityMatrix::from_matrix_unchecked(next),
        dy,
        min_eigenvalue,
    })
}

fn check_step_inputs(rho: &DensityMatrix, l: &HermitianOperator, params: &SimParams, dw: f64) -> Result<()> {
    params.validate()?;
    if rho.dim() != l.dim() {
        return Err(Error::DimensionMismatch {
            expected: l.dim(),
            found: rho.dim(),
        });
    }
    if !dw.is_finite() {
        return Err(Error::InvalidArgument(format!("dW = {dw} is not finite")));
    }
    Ok(())
}

/// One open-loop step `rho + D(L, rho) dt + sqrt(eta) M(L, rho) dW`.
pub fn step_open_loop(rho: &DensityMatrix, l: &HermitianOperator, params: &SimParams, dw: f64) -> Result<StepResult> {
    check_step_inputs(rho, l, params, dw)?;
    let ops = Operators::new(l, None, params)?;
    let mut ws = Workspace::new(ops.n);
    let dy = ops.record_increment(rho.matrix(), params.dt, dw);
    expanded_update(&ops, &mut ws, rho.matrix(), 0.0, 0.0, params.dt, dw);
    finish_step(ws.next, dy)
}

/// One step of the expanded closed-loop SME with gains `(f, kappa)`
/// evaluated by the caller at the pre-step state.
pub fn step_closed_expanded(
    rho: &DensityMatrix,
    l: &HermitianOperator,
    actuator: &HermitianOperator,
    f: f64,
    kappa: f64,
    params: &SimParams,
    dw: f64,
) -> Result<StepResult> {
    check_step_inputs(rho, l, params, dw)?;
    check_gains(f, kappa)?;
    let ops = Operators::new(l, Some(actuator), params)?;
    let mut ws = Workspace::new(ops.n);
    let dy = ops.record_increment(rho.matrix(), params.dt, dw);
    expanded_update(&ops, &mut ws, rho.matrix(), f, kappa, params.dt, dw);
    finish_step(ws.next, dy)
}

/// One step of the propagator form `exp(-iF u dt) X exp(iF u dt)`.
pub fn step_closed_propagator(
    rho: &DensityMatrix,
    l: &HermitianOperator,
    actuator: &HermitianOperator,
    f: f64,
    kappa: f64,
    params: &SimParams,
    dw: f64,
) -> Result<StepResult> {
    check_step_inputs(rho, l, params, dw)?;
    check_gains(f, kappa)?;
    let ops = Operators::new(l, Some(actuator), params)?;
    let dy = ops.record_increment(rho.matrix(), params.dt, dw);
    finish_step(propagator_update(&ops, rho.matrix(), f, kappa, params.dt, dw), dy)
}

fn check_gains(f: f64, kappa: f64) -> Result<()> {
    if !f.is_finite() || !kappa.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "gains must be finite (f = {f}, kappa = {kappa})"
        )));
    }
    Ok(())
}

/// Samples recorded along one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub index: u64,
    pub times: Vec<f64>,
    /// Bloch vectors; empty unless the system is a qubit.
    pub bloch: Vec<BlochVector>,
    /// `tr(rho rho_l)` for every eigenstate of the measurement operator.
    pub populations: Vec<Vec<f64>>,
    /// Monitored Lyapunov function; empty without a monitor.
    pub lyapunov: Vec<f64>,
    /// Cumulative measurement record `Y_t`.
    pub y_record: Vec<f64>,
    pub terminal_state: DensityMatrix,
    /// Most negative eigenvalue observed before projection over the run,
    /// zero if no step needed clipping.
    pub min_eigenvalue: f64,
    /// Number of steps whose raw update had a negative eigenvalue.
    pub clipped_steps: usize,
}

/// Mean and standard error of a sampled quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesStats {
    pub mean: Vec<f64>,
    /// `None` for a single trajectory.
    pub sem: Option<Vec<f64>>,
}

impl SeriesStats {
    /// Statistics over rows `samples[traj][k]`; every row has the same length.
    pub fn from_samples<R: AsRef<[f64]>>(samples: &[R]) -> Self {
        let count = samples.len();
        let len = samples.first().map_or(0, |r| r.as_ref().len());
        let mut mean = vec![0.0; len];
        for row in samples {
            for (m, v) in mean.iter_mut().zip(row.as_ref()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let sem = (count > 1).then(|| {
            let mut ss = vec![0.0; len];
            for row in samples {
                for ((s, v), m) in ss.iter_mut().zip(row.as_ref()).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            ss.iter()
                .map(|s| (s / (count - 1) as f64 / count as f64).sqrt())
                .collect()
        });
        Self { mean, sem }
    }

    /// SEM at sample `k`, zero when unavailable.
    pub fn sem_at(&self, k: usize) -> f64 {
        self.sem.as_ref().map_or(0.0, |s| s[k])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub n_traj: usize,
    pub times: Vec<f64>,
    pub lyapunov: Option<SeriesStats>,
    pub x: Option<SeriesStats>,
    pub y: Option<SeriesStats>,
    pub z: Option<SeriesStats>,
    pub populations: Vec<SeriesStats>,
}

impl EnsembleStats {
    /// Aggregates records in the given order; callers keep index order so
    /// the result does not depend on scheduling.
    pub fn from_records(records: &[TrajectoryRecord]) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::InvalidArgument("no trajectories to aggregate".into()))?;
        if records.iter().any(|r| r.times.len() != first.times.len()) {
            return Err(Error::InvalidArgument(
                "trajectories have different sample grids".into(),
            ));
        }
        let column = |pick: &dyn Fn(&TrajectoryRecord) -> Vec<f64>| {
            let rows: Vec<Vec<f64>> = records.iter().map(pick).collect();
            SeriesStats::from_samples(&rows)
        };
        let lyapunov = (!first.lyapunov.is_empty()).then(|| column(&|r| r.lyapunov.clone()));
        let qubit = !first.bloch.is_empty();
        let x = qubit.then(|| column(&|r| r.bloch.iter().map(|b| b.x).collect()));
        let y = qubit.then(|| column(&|r| r.bloch.iter().map(|b| b.y).collect()));
        let z = qubit.then(|| column(&|r| r.bloch.iter().map(|b| b.z).collect()));
        let n_levels = first.populations.first().map_or(0, Vec::len);
        let populations = (0..n_levels)
            .map(|l| column(&|r| r.populations.iter().map(|p| p[l]).collect()))
            .collect();
        Ok(Self {
            n_traj: records.len(),
            times: first.times.clone(),
            lyapunov,
            x,
            y,
            z,
            populations,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub stats: EnsembleStats,
    /// Individual records, empty unless retention was requested.
    pub trajectories: Vec<TrajectoryRecord>,
}

/// A configured closed- or open-loop experiment.
#[derive(Debug, Clone)]
pub struct Simulation {
    system: QndSystem,
    controller: Controller,
    params: SimParams,
    stepper: Stepper,
    stride: usize,
    monitor: Option<LyapunovSpec>,
}

impl Simulation {
    pub fn new(system: QndSystem, controller: Controller, params: SimParams) -> Result<Self> {
        params.validate()?;
        controller.validate(params.eta)?;
        if !controller.is_null() && system.dim() != 2 {
            return Err(Error::NotQubit(system.dim()));
        }
        if params.gamma_dec > 0.0 && system.dim() != 2 {
            return Err(Error::NotQubit(system.dim()));
        }
        Ok(Self {
            system,
            controller,
            params,
            stepper: Stepper::default(),
            stride: DEFAULT_STRIDE,
            monitor: None,
        })
    }

    pub fn with_stepper(mut self, stepper: Stepper) -> Self {
        self.stepper = stepper;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride.max(1);
        self
    }

    pub fn with_monitor(mut self, monitor: LyapunovSpec) -> Self {
        self.monitor = Some(monitor);
        self
    }

    pub fn with_params(mut self, params: SimParams) -> Result<Self> {
        params.validate()?;
        self.controller.validate(params.eta)?;
        self.params = params;
        Ok(self)
    }

    pub fn system(&self) -> &QndSystem {
        &self.system
    }

    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn stepper(&self) -> Stepper {
        self.stepper
    }

    pub fn monitor(&self) -> Option<&LyapunovSpec> {
        self.monitor.as_ref()
    }

    fn check_initial(&self, rho0: &DensityMatrix) -> Result<()> {
        if rho0.dim() != self.system.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.system.dim(),
                found: rho0.dim(),
            });
        }
        Ok(())
    }

    /// Drift and diffusion matrices of the closed-loop SME at `rho`, with
    /// gains frozen at `rho`.
    pub fn sde_coefficients(&self, rho: &DensityMatrix) -> Result<(CMatrix, CMatrix)> {
        self.check_initial(rho)?;
        let actuator = self.controller.actuator();
        let ops = Operators::new(self.system.measurement(), actuator.as_ref(), &self.params)?;
        let (f, kappa) = if self.controller.is_null() {
            (0.0, 0.0)
        } else {
            self.controller
                .gains(&bloch_unchecked(rho.matrix()), self.params.eta, self.params.gamma)
        };
        let mut ws = Workspace::new(ops.n);
        let r = rho.matrix();
        expanded_update(&ops, &mut ws, r, f, kappa, 1.0, 0.0);
        let drift = &ws.next - r;
        expanded_update(&ops, &mut ws, r, f, kappa, 0.0, 1.0);
        let diffusion = &ws.next - r;
        Ok((drift, diffusion))
    }

    /// Fixed-size kernels for small systems, the general kernel otherwise.
    fn kernel(&self) -> Result<Box<dyn Kernel + '_>> {
        Ok(match (self.stepper, self.system.dim()) {
            (Stepper::Expanded, 2) => Box::new(StaticKernel::<2>::new(self)?),
            (Stepper::Expanded, 3) => Box::new(StaticKernel::<3>::new(self)?),
            (Stepper::Expanded, 4) => Box::new(StaticKernel::<4>::new(self)?),
            _ => Box::new(Integrator::new(self)?),
        })
    }

    /// Integrates `n_steps` steps from `rho0` with caller-supplied increments.
    pub fn evolve(
        &self,
        rho0: &DensityMatrix,
        n_steps: usize,
        mut increments: impl FnMut() -> f64,
    ) -> Result<DensityMatrix> {
        self.check_initial(rho0)?;
        let mut kernel = self.kernel()?;
        kernel.load(rho0.matrix());
        for k in 0..n_steps {
            kernel.step(increments(), k as f64 * self.params.dt)?;
        }
        Ok(DensityMatrix::from_matrix_unchecked(kernel.store()))
    }

    /// Runs trajectory `index`; its noise depends only on `(seed, index)`.
    pub fn run_trajectory(&self, rho0: &DensityMatrix, index: u64) -> Result<TrajectoryRecord> {
        self.check_initial(rho0)?;
        let p = &self.params;
        let n_steps = p.n_steps();
        let n_samples = n_steps / self.stride + 2;
        let mut record = TrajectoryRecord {
            index,
            times: Vec::with_capacity(n_samples),
            bloch: Vec::with_capacity(if self.system.dim() == 2 { n_samples } else { 0 }),
            populations: Vec::with_capacity(n_samples),
            lyapunov: Vec::with_capacity(n_samples),
            y_record: Vec::with_capacity(n_samples),
            terminal_state: rho0.clone(),
            min_eigenvalue: 0.0,
            clipped_steps: 0,
        };
        let mut noise = NoiseStream::new(p.seed, index, p.dt);
        let mut kernel = self.kernel()?;
        kernel.load(rho0.matrix());
        let mut y = 0.0;
        self.record_sample(&mut record, rho0.matrix(), 0.0, y);
        for k in 1..=n_steps {
            let t = (k - 1) as f64 * p.dt;
            let info = kernel.step(noise.next_increment(), t)?;
            y += info.dy;
            record.min_eigenvalue = record.min_eigenvalue.min(info.min_eigenvalue);
            if info.min_eigenvalue < 0.0 {
                record.clipped_steps += 1;
            }
            if k % self.stride == 0 || k == n_steps {
                self.record_sample(&mut record, &kernel.store(), k as f64 * p.dt, y);
            }
        }
        record.terminal_state = DensityMatrix::from_matrix_unchecked(kernel.store());
        Ok(record)
    }

    fn record_sample(&self, record: &mut TrajectoryRecord, rho: &CMatrix, t: f64, y: f64) {
        record.times.push(t);
        if self.system.dim() == 2 {
            record.bloch.push(bloch_unchecked(rho));
        }
        record
            .populations
            .push(populations_unchecked(self.system.spectrum.eigenvectors(), rho));
        if let Some(monitor) = &self.monitor {
            record.lyapunov.push(monitor.value_unchecked(rho));
        }
        record.y_record.push(y);
    }

    /// Runs trajectories `0..n_traj` (in parallel) and aggregates them in
    /// index order.
    pub fn run_ensemble(&self, rho0: &DensityMatrix, retain: bool) -> Result<Ensemble> {
        self.check_initial(rho0)?;
        let records = (0..self.params.n_traj as u64)
            .into_par_iter()
            .map(|index| self.run_trajectory(rho0, index))
            .collect::<Result<Vec<_>>>()?;
        let stats = EnsembleStats::from_records(&records)?;
        Ok(Ensemble {
            stats,
            trajectories: if retain { records } else { Vec::new() },
        })
    }
}

pub(crate) struct StepInfo {
    pub dy: f64,
    pub min_eigenvalue: f64,
}

/// A stepper owning the current state.
trait Kernel {
    fn load(&mut self, rho: &CMatrix);
    fn store(&self) -> CMatrix;
    fn step(&mut self, dw: f64, t: f64) -> Result<StepInfo>;
}

fn gains_at(controller: &Controller, rho00: f64, rho11: f64, rho01: C64, p: &SimParams) -> (f64, f64) {
    if controller.is_null() {
        return (0.0, 0.0);
    }
    let b = BlochVector::from_coordinates(2.0 * rho01.re, -2.0 * rho01.im, rho00 - rho11);
    controller.gains(&b, p.eta, p.gamma)
}

/// General-dimension kernel; the only one implementing the propagator form.
struct Integrator<'a> {
    sim: &'a Simulation,
    ops: Operators,
    ws: Workspace,
    rho: CMatrix,
}

impl<'a> Integrator<'a> {
    fn new(sim: &'a Simulation) -> Result<Self> {
        let actuator = sim.controller.actuator();
        let ops = Operators::new(sim.system.measurement(), actuator.as_ref(), &sim.params)?;
        Ok(Self {
            sim,
            ws: Workspace::new(ops.n),
            rho: CMatrix::zeros(ops.n, ops.n),
            ops,
        })
    }
}

impl Kernel for Integrator<'_> {
    fn load(&mut self, rho: &CMatrix) {
        self.rho.copy_from(rho);
    }

    fn store(&self) -> CMatrix {
        self.rho.clone()
    }

    fn step(&mut self, dw: f64, t: f64) -> Result<StepInfo> {
        let p = &self.sim.params;
        let rho = &mut self.rho;
        let (f, kappa) = if self.ops.n == 2 {
            gains_at(&self.sim.controller, rho[(0, 0)].re, rho[(1, 1)].re, rho[(0, 1)], p)
        } else {
            (0.0, 0.0)
        };
        let dy = self.ops.record_increment(rho, p.dt, dw);
        match self.sim.stepper {
            Stepper::Expanded => {
                expanded_update(&self.ops, &mut self.ws, rho, f, kappa, p.dt, dw);
                std::mem::swap(rho, &mut self.ws.next);
            }
            Stepper::Propagator => {
                *rho = propagator_update(&self.ops, rho, f, kappa, p.dt, dw);
            }
        }
        let min_eigenvalue = project_in_place(rho, t + p.dt)?;
        Ok(StepInfo { dy, min_eigenvalue })
    }
}

type SMat<const N: usize> = SMatrix<C64, N, N>;

/// Stack-allocated expanded-SME kernel for `N <= 4`; arithmetic is the
/// same as [`expanded_update`] followed by [`project_in_place`].
struct StaticKernel<const N: usize> {
    controller: Controller,
    params: SimParams,
    sqrt_eta: f64,
    l: SMat<N>,
    l_sq: SMat<N>,
    f: SMat<N>,
    f_sq: SMat<N>,
    f_anti_l: SMat<N>,
    i_comm_fl: SMat<N>,
    rho: SMat<N>,
}

impl<const N: usize> StaticKernel<N> {
    fn new(sim: &Simulation) -> Result<Self> {
        let actuator = sim.controller.actuator();
        let ops = Operators::new(sim.system.measurement(), actuator.as_ref(), &sim.params)?;
        let fix = |m: &CMatrix| SMat::<N>::from_fn(|i, k| m[(i, k)]);
        Ok(Self {
            controller: sim.controller,
            params: sim.params,
            sqrt_eta: ops.sqrt_eta,
            l: fix(&ops.l),
            l_sq: fix(&ops.l_sq),
            f: fix(&ops.f),
            f_sq: fix(&ops.f_sq),
            f_anti_l: fix(&ops.f_anti_l),
            i_comm_fl: fix(&ops.i_comm_fl),
            rho: SMat::<N>::zeros(),
        })
    }
}

impl<const N: usize> Kernel for StaticKernel<N> {
    fn load(&mut self, rho: &CMatrix) {
        self.rho = SMat::<N>::from_fn(|i, k| rho[(i, k)]);
    }

    fn store(&self) -> CMatrix {
        CMatrix::from_fn(N, N, |i, k| self.rho[(i, k)])
    }

    #[inline]
    fn step(&mut self, dw: f64, t: f64) -> Result<StepInfo> {
        let p = &self.params;
        let rho = &self.rho;
        let real = |v: f64| C64::new(v, 0.0);
        let (f, kappa) = if N == 2 {
            gains_at(&self.controller, rho[(0, 0)].re, rho[(1, 1)].re, rho[(0, 1)], p)
        } else {
            (0.0, 0.0)
        };
        let se = self.sqrt_eta;
        let lr = self.l * rho;
        let dy = 2.0 * se * lr.trace().re * p.dt + dw;

        let mut a = self.l_sq * real(-0.5);
        let mut c = self.l;
        let mut j = self.l * real(se);
        let controlled = f != 0.0 || kappa != 0.0;
        if controlled {
            a += (self.f * real(f) + self.f_anti_l * real(0.5 * kappa * se)) * MINUS_I
                - (self.f_sq * real(kappa * kappa) + self.i_comm_fl * real(kappa * se)) * HALF;
            c += self.f * (MINUS_I * (kappa * se));
            j += self.f * (MINUS_I * kappa);
        }
        if p.gamma_dec > 0.0 {
            a[(0, 0)] -= real(0.25 * p.gamma_dec);
        }
        let ar = a * rho;
        let cr = c * rho;
        let mut drift = ar + ar.adjoint() + cr * c.adjoint();
        let outer_f = kappa * kappa * (1.0 - p.eta);
        if controlled && outer_f != 0.0 {
            drift += self.f * rho * self.f * real(outer_f);
        }
        if p.gamma_dec > 0.0 {
            drift[(1, 1)] += rho[(0, 0)] * (0.5 * p.gamma_dec);
        }
        let jr = j * rho;
        let jsym = jr + jr.adjoint();
        let diffusion = jsym - rho * real(jsym.trace().re);
        let mut next = rho + drift * real(p.dt) + diffusion * real(dw);

        let min_eigenvalue = project_static(&mut next, t + p.dt)?;
        self.rho = next;
        Ok(StepInfo { dy, min_eigenvalue })
    }
}

fn project_static<const N: usize>(m: &mut SMat<N>, time: f64) -> Result<f64> {
    if m.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::IntegratorDiverged {
            time,
            min_eigenvalue: f64::NAN,
        });
    }
    for i in 0..N {
        m[(i, i)].im = 0.0;
        for k in i + 1..N {
            let avg = (m[(i, k)] + m[(k, i)].conj()) * 0.5;
            m[(i, k)] = avg;
            m[(k, i)] = avg.conj();
        }
    }
    let lowest;
    if N == 2 {
        let a = m[(0, 0)].re;
        let d = m[(1, 1)].re;
        let half = 0.5 * (a - d);
        lowest = 0.5 * (a + d) - (half * half + m[(0, 1)].norm_sqr()).sqrt();
        if lowest < DIVERGENCE_THRESHOLD {
            return Err(Error::IntegratorDiverged {
                time,
                min_eigenvalue: lowest,
            });
        }
        if lowest < 0.0 {
            let highest = a + d - lowest;
            m[(0, 0)] -= C64::new(lowest, 0.0);
            m[(1, 1)] -= C64::new(lowest, 0.0);
            *m *= C64::new(1.0 / (highest - lowest), 0.0);
        }
    } else {
        // Cholesky succeeds for positive definite matrices, which is the
        // common case; fall back to a full decomposition otherwise.
        if m.cholesky().is_some() {
            lowest = 0.0;
        } else {
            let mut general = CMatrix::from_fn(N, N, |i, k| m[(i, k)]);
            let lowest = project_in_place(&mut general, time)?;
            *m = SMat::<N>::from_fn(|i, k| general[(i, k)]);
            return Ok(lowest);
        }
    }
    let tr = m.trace().re;
    *m /= C64::new(tr, 0.0);
    Ok(lowest.min(0.0))
}
