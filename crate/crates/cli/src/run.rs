//! Ensemble runs, sweeps and their artifacts.

use std::fs;
use std::path::Path;

use qnd_core::{check_exponential_bound, BoundKind, Ensemble, LyapunovSpec, Simulation, Verdict};
use serde::Serialize;

use crate::config::{ControllerSpec, Experiment, ExperimentConfig};
use crate::svg::{self, Series};
use crate::CliError;

/// Floats are written with 17 significant digits, which round-trips `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub const ENSEMBLE_HEADER: [&str; 7] = ["t", "mean_V", "sem_V", "mean_x", "mean_y", "mean_z", "bound_V"];
pub const TRAJECTORY_HEADER: [&str; 4] = ["traj_id", "t", "V", "z"];
pub const SWEEP_HEADER: [&str; 5] = ["value", "terminal_mean_V", "fitted_rate", "certified_rate", "pass"];

/// Certified decay rate and its shape.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Certificate {
    pub rate: f64,
    pub bound: BoundKind,
    pub v0: f64,
}

/// Time averages over the second half of the run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Plateau {
    pub window: [f64; 2],
    pub mean_v: Option<f64>,
    pub mean_z: Option<f64>,
}

/// Contents of `verdict.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub scenario: &'static str,
    pub n_traj: usize,
    pub seed: u64,
    pub dt: f64,
    pub t_final: f64,
    /// `false` when no certificate covers the run: smooth feedback, or an
    /// extra decay channel the certificates do not model.
    pub applicable: bool,
    pub certificate: Option<Certificate>,
    pub verdict: Option<Verdict>,
    pub plateau: Plateau,
    pub max_clipped_steps: usize,
    pub min_eigenvalue: f64,
}

impl RunReport {
    /// `false` only for an applicable certificate whose check failed.
    pub fn passed(&self) -> bool {
        self.verdict.as_ref().is_none_or(|v| v.pass)
    }
}

fn sim_error(e: qnd_core::Error) -> CliError {
    match e {
        qnd_core::Error::IntegratorDiverged { .. } => CliError::Diverged(e),
        other => CliError::Config(other.to_string()),
    }
}

/// Runs one experiment and writes its artifacts into `output_dir`.
pub fn run(exp: &Experiment) -> Result<RunReport, CliError> {
    let p = &exp.params;
    let monitor = LyapunovSpec::for_controller(&exp.controller, exp.system.spectrum(), p)
        .map_err(sim_error)?
        .or_else(|| {
            // Smooth feedback has no certificate; monitor the adaptive function.
            (exp.system.dim() == 2)
                .then(|| LyapunovSpec::adaptive(qnd_core::Target::Excited, p.eta, p.gamma).ok())
                .flatten()
        });
    let certified =
        monitor.is_some() && p.gamma_dec == 0.0 && !matches!(exp.controller, qnd_core::Controller::SmoothState { .. });
    let mut sim = Simulation::new(exp.system.clone(), exp.controller, p.clone())
        .map_err(sim_error)?
        .with_stride(exp.stride);
    if let Some(m) = &monitor {
        sim = sim.with_monitor(m.clone());
    }
    let retain = exp.emit_trajectories || exp.emit_svg;
    let ensemble = sim.run_ensemble(&exp.rho0, retain).map_err(sim_error)?;

    let certificate = match (&monitor, certified) {
        (Some(m), true) => Some(Certificate {
            rate: m.rate(),
            bound: m.bound_kind(),
            v0: m.value(&exp.rho0).map_err(sim_error)?,
        }),
        _ => None,
    };
    let verdict = match (&monitor, &certificate) {
        (Some(m), Some(c)) => Some(check_exponential_bound(&ensemble.stats, m, c.v0).map_err(sim_error)?),
        _ => None,
    };

    fs::create_dir_all(&exp.output_dir).map_err(|e| CliError::io(&exp.output_dir, e))?;
    write_ensemble_csv(&exp.output_dir.join("ensemble.csv"), &ensemble, certificate.as_ref())?;
    if exp.emit_trajectories {
        write_trajectories_csv(&exp.output_dir.join("trajectories.csv"), &ensemble)?;
    }
    if exp.emit_svg {
        let path = exp.output_dir.join("figure.svg");
        fs::write(&path, figure(&ensemble, certificate.as_ref(), exp.scenario.name()))
            .map_err(|e| CliError::io(&path, e))?;
    }

    let stats = &ensemble.stats;
    let half = 0.5 * p.t_final;
    let window: Vec<usize> = (0..stats.times.len()).filter(|&k| stats.times[k] >= half).collect();
    let average = |series: &[f64]| window.iter().map(|&k| series[k]).sum::<f64>() / window.len() as f64;
    let report = RunReport {
        scenario: exp.scenario.name(),
        n_traj: p.n_traj,
        seed: p.seed,
        dt: p.dt,
        t_final: p.t_final,
        applicable: certificate.is_some(),
        certificate,
        verdict,
        plateau: Plateau {
            window: [half, p.t_final],
            mean_v: stats.lyapunov.as_ref().map(|s| average(&s.mean)),
            mean_z: stats.z.as_ref().map(|s| average(&s.mean)),
        },
        max_clipped_steps: ensemble.trajectories.iter().map(|r| r.clipped_steps).max().unwrap_or(0),
        min_eigenvalue: ensemble
            .trajectories
            .iter()
            .map(|r| r.min_eigenvalue)
            .fold(0.0, f64::min),
    };
    let path = exp.output_dir.join("verdict.json");
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&path, json + "\n").map_err(|e| CliError::io(&path, e))?;
    Ok(report)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    csv::Writer::from_path(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn csv_error(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn write_ensemble_csv(path: &Path, ensemble: &Ensemble, certificate: Option<&Certificate>) -> Result<(), CliError> {
    let s = &ensemble.stats;
    let mut w = csv_writer(path)?;
    w.write_record(ENSEMBLE_HEADER).map_err(csv_error(path))?;
    for (k, &t) in s.times.iter().enumerate() {
        let mean = |series: &Option<qnd_core::SeriesStats>| series.as_ref().map(|v| v.mean[k]);
        let sem = s.lyapunov.as_ref().and_then(|v| v.sem.as_ref().map(|sem| sem[k]));
        let bound = certificate.map(|c| (-c.rate * t).exp() * c.v0);
        w.write_record([
            fmt_f64(t),
            fmt_opt(mean(&s.lyapunov)),
            fmt_opt(sem),
            fmt_opt(mean(&s.x)),
            fmt_opt(mean(&s.y)),
            fmt_opt(mean(&s.z)),
            fmt_opt(bound),
        ])
        .map_err(csv_error(path))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn write_trajectories_csv(path: &Path, ensemble: &Ensemble) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    w.write_record(TRAJECTORY_HEADER).map_err(csv_error(path))?;
    for r in &ensemble.trajectories {
        for (k, &t) in r.times.iter().enumerate() {
            w.write_record([
                r.index.to_string(),
                fmt_f64(t),
                fmt_opt(r.lyapunov.get(k).copied()),
                fmt_opt(r.bloch.get(k).map(|b| b.z)),
            ])
            .map_err(csv_error(path))?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// At most this many individual trajectories are drawn.
const FIGURE_TRAJECTORIES: usize = 40;

fn figure(ensemble: &Ensemble, certificate: Option<&Certificate>, title: &str) -> String {
    let s = &ensemble.stats;
    let (label, mean, per_traj): (&str, Vec<f64>, Vec<Vec<f64>>) = match &s.lyapunov {
        Some(v) => (
            "V",
            v.mean.clone(),
            ensemble.trajectories.iter().map(|r| r.lyapunov.clone()).collect(),
        ),
        None => (
            "population 0",
            s.populations[0].mean.clone(),
            ensemble
                .trajectories
                .iter()
                .map(|r| r.populations.iter().map(|p| p[0]).collect())
                .collect(),
        ),
    };
    let mut series: Vec<Series> = per_traj
        .into_iter()
        .take(FIGURE_TRAJECTORIES)
        .map(|ys| Series::trajectory(&s.times, ys))
        .collect();
    series.push(Series::mean(&s.times, mean, "Ensemble average"));
    if let Some(c) = certificate {
        let bound = s.times.iter().map(|t| (-c.rate * t).exp() * c.v0).collect();
        series.push(Series::bound(&s.times, bound, "Bound"));
    }
    svg::render(title, "t", label, &series)
}

/// Parameters a sweep may vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum SweepParam {
    Eta,
    GammaDec,
    Dt,
    NTraj,
    ThetaBar,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Eta => "eta",
            SweepParam::GammaDec => "gamma_dec",
            SweepParam::Dt => "dt",
            SweepParam::NTraj => "n_traj",
            SweepParam::ThetaBar => "theta_bar",
        }
    }

    fn apply(self, config: &mut ExperimentConfig, value: f64) -> Result<(), CliError> {
        let p = &mut config.params;
        match self {
            SweepParam::Eta => p.eta = Some(value),
            SweepParam::GammaDec => p.gamma_dec = Some(value),
            SweepParam::Dt => p.dt = Some(value),
            SweepParam::NTraj => {
                if value.fract() != 0.0 || value < 1.0 {
                    return Err(CliError::Config(format!(
                        "n_traj must be a positive integer, got {value}"
                    )));
                }
                p.n_traj = Some(value as usize);
            }
            SweepParam::ThetaBar => {
                let alpha_bar = match config.controller {
                    Some(ControllerSpec::StaticOutput { alpha_bar, .. }) => alpha_bar,
                    None if config.scenario == crate::config::Scenario::Lemma3 => 0.0,
                    _ => {
                        return Err(CliError::Config(
                            "theta_bar sweeps need a static_output controller".into(),
                        ))
                    }
                };
                config.controller = Some(ControllerSpec::StaticOutput {
                    theta_bar: value,
                    alpha_bar,
                });
            }
        }
        Ok(())
    }
}

/// One row of `sweep_summary.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub terminal_mean_v: Option<f64>,
    pub fitted_rate: Option<f64>,
    pub certified_rate: Option<f64>,
    pub report: RunReport,
}

/// Least-squares slope of `ln y` against `t`, negated, over samples with
/// `t <= horizon` and `y > 0`.
pub fn fitted_decay_rate(times: &[f64], values: &[f64], horizon: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(t, y)| **t <= horizon && **y > 0.0)
        .map(|(t, y)| (*t, y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    (sxx > 0.0).then(|| -sxy / sxx)
}

/// Runs `config` once per value, each into `<output_dir>/<param>_<index>`,
/// and writes `sweep_summary.csv`.
pub fn sweep(config: &ExperimentConfig, param: SweepParam, values: &[f64]) -> Result<Vec<SweepRow>, CliError> {
    if values.is_empty() {
        return Err(CliError::Config("sweep needs at least one value".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for (i, &value) in values.iter().enumerate() {
        let mut c = config.clone();
        param.apply(&mut c, value)?;
        c.output_dir = config.output_dir.join(format!("{}_{i}", param.name()));
        let exp = c.resolve()?;
        let report = run(&exp)?;
        let ensemble_path = exp.output_dir.join("ensemble.csv");
        let (times, mean_v) = read_mean_v(&ensemble_path)?;
        let certified_rate = report.certificate.as_ref().map(|c| c.rate);
        let horizon = certified_rate.map_or(f64::INFINITY, |r| 2.0 / r);
        rows.push(SweepRow {
            value,
            terminal_mean_v: mean_v.last().copied().flatten(),
            fitted_rate: {
                let (t, v): (Vec<f64>, Vec<f64>) = times
                    .iter()
                    .zip(&mean_v)
                    .filter_map(|(t, v)| v.map(|v| (*t, v)))
                    .unzip();
                fitted_decay_rate(&t, &v, horizon)
            },
            certified_rate,
            report,
        });
    }
    fs::create_dir_all(&config.output_dir).map_err(|e| CliError::io(&config.output_dir, e))?;
    let path = config.output_dir.join("sweep_summary.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(SWEEP_HEADER).map_err(csv_error(&path))?;
    for r in &rows {
        w.write_record([
            fmt_f64(r.value),
            fmt_opt(r.terminal_mean_v),
            fmt_opt(r.fitted_rate),
            fmt_opt(r.certified_rate),
            r.report.passed().to_string(),
        ])
        .map_err(csv_error(&path))?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    Ok(rows)
}

/// Reads `t` and `mean_V` back from an `ensemble.csv`.
pub fn read_mean_v(path: &Path) -> Result<(Vec<f64>, Vec<Option<f64>>), CliError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error(path))?;
    let mut times = Vec::new();
    let mut values = Vec::new();
    for record in r.records() {
        let record = record.map_err(csv_error(path))?;
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
        };
        times.push(parse(&record[0])?);
        values.push(if record[1].is_empty() {
            None
        } else {
            Some(parse(&record[1])?)
        });
    }
    Ok((times, values))
}
