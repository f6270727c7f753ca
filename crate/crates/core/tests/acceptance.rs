//! Acceptance gate. Prints one `PASS`/`FAIL` line per criterion check and
//! exits non-zero if any check fails.
//!
//! Run a subset with `cargo test --test acceptance -- 3 6`.
//!
//! Some criteria carry companion checks (suffix letters). A literal check
//! that fails is never relaxed; its companion records the property the
//! dynamics does satisfy.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use qnd_core::analysis::{fd_generator, full_generator_fd, xyxi_sde_coefficients, GENERATOR_SUBSTEPS};
use qnd_core::qop::hermitian_eigen;
use qnd_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Systematic allowance and SEM multiple of the decay-bound protocol.
const SYSTEMATIC: f64 = 0.02;
const SEM_MULTIPLE: f64 = 3.0;
/// Terminal distance to an eigenprojector for open-loop selection.
const SELECTION_TOL: f64 = 1e-3;
const BINOMIAL_SEMS: f64 = 4.0;
/// Below this the expanded-vs-propagator gap is round-off, not a rate.
const ROUNDOFF_FLOOR: f64 = 1e-12;
const HALVING_RATIO: f64 = 1.8;
/// Absolute tolerance of closed-form generators against finite differences.
const FD_TOL: f64 = 1e-6;
/// Minimum distance of sampled generator points from the target.
const EXCLUSION_RADIUS: f64 = 1e-3;
const PLATEAU_WINDOW: (f64, f64) = (50.0, 100.0);

struct Check {
    label: String,
    pass: bool,
    detail: String,
}

fn check(label: &str, pass: bool, detail: impl Into<String>) -> Check {
    Check {
        label: label.to_string(),
        pass,
        detail: detail.into(),
    }
}

type Criterion = fn() -> Result<Vec<Check>>;

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, Criterion); 8] = [
        ("1", c1_adaptive_bound),
        ("2", c2_static_output_decay),
        ("3", c3_open_loop),
        ("4", c4_obstruction),
        ("5", c5_stepper_equivalence),
        ("6", c6_generators),
        ("7", c7_decoherence_plateaus),
        ("8", c8_invariants),
    ];
    // The decay checks use the library's protocol; pin it here.
    assert_eq!(
        (analysis::SYSTEMATIC_TOL, analysis::SEM_FACTOR),
        (SYSTEMATIC, SEM_MULTIPLE)
    );
    let mut failed = 0;
    for (id, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == id) {
            continue;
        }
        let start = Instant::now();
        let checks = run().unwrap_or_else(|e| vec![check(&format!("C{id}"), false, format!("error: {e}"))]);
        for c in &checks {
            println!(
                "{} {} {} ({:.1} s)",
                if c.pass { "PASS" } else { "FAIL" },
                c.label,
                c.detail,
                start.elapsed().as_secs_f64()
            );
            failed += usize::from(!c.pass);
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance check(s) failed");
        ExitCode::FAILURE
    }
}

fn qubit_sim(controller: Controller, params: SimParams) -> Result<Simulation> {
    Simulation::new(QndSystem::qubit(params.gamma)?, controller, params)
}

fn verdict_detail(v: &Verdict) -> String {
    format!(
        "rate {:.4}, worst margin {:+.3e} at t = {:.2}, {} samples",
        v.rate, v.worst_margin, v.worst_time, v.samples_checked
    )
}

/// Ginibre-type mixed state `G G* / tr`.
fn random_density(rng: &mut impl Rng, n: usize) -> DensityMatrix {
    let g = DMatrix::from_fn(n, n, |_, _| {
        C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    });
    let m = &g * g.adjoint();
    let tr = m.trace();
    DensityMatrix::new(m / tr).expect("Ginibre state")
}

fn random_hermitian(rng: &mut impl Rng, n: usize) -> CMatrix {
    let g = DMatrix::from_fn(n, n, |_, _| {
        C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    });
    (&g + g.adjoint()) * C64::new(0.5, 0.0)
}

/// Uniform point of the Bloch ball as `(x, y, xi)`, at least
/// `EXCLUSION_RADIUS` away from the excited state.
fn random_xyxi(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let (x, y, z): (f64, f64, f64) = (
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if x * x + y * y + z * z > 1.0 {
            continue;
        }
        let xi = (1.0 - z).sqrt();
        if (x * x + y * y + xi * xi).sqrt() >= EXCLUSION_RADIUS {
            return [x, y, xi];
        }
    }
}

fn density_from_xyxi(s: [f64; 3]) -> Result<DensityMatrix> {
    from_bloch(&BlochVector::new(s[0], s[1], 1.0 - s[2] * s[2])?)
}

fn c1_adaptive_bound() -> Result<Vec<Check>> {
    let params = SimParams {
        dt: 1e-4,
        t_final: 80.0,
        eta: 0.5,
        gamma: 1.0,
        n_traj: 100,
        seed: 1,
        ..SimParams::default()
    };
    let spec = LyapunovSpec::adaptive(Target::Excited, params.eta, params.gamma)?;
    let sim = qubit_sim(
        Controller::AdaptiveQnd {
            target: Target::Excited,
        },
        params,
    )?
    .with_monitor(spec.clone())
    .with_stride(1000);
    let rho0 = DensityMatrix::maximally_mixed(2);
    let ensemble = sim.run_ensemble(&rho0, false)?;
    let v = check_exponential_bound(&ensemble.stats, &spec, spec.value(&rho0)?)?;
    Ok(vec![check("C1", v.pass, verdict_detail(&v))])
}

fn c2_static_output_decay() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (tag, theta_bar) in [("pi/2", FRAC_PI_2), ("pi/4", FRAC_PI_4)] {
        let controller = Controller::static_output(theta_bar, 0.0)?;
        let spec = LyapunovSpec::static_output(&controller, 1.0)?;
        let r = spec.rate();
        let params = SimParams {
            dt: 1e-4,
            t_final: 5.0 / r,
            eta: 1.0,
            gamma: 1.0,
            n_traj: 1000,
            seed: 2,
            ..SimParams::default()
        };
        let sim = qubit_sim(controller, params)?
            .with_monitor(spec.clone())
            .with_stride(100);
        let rho0 = DensityMatrix::maximally_mixed(2);
        let v0 = spec.value(&rho0)?;
        let stats = sim.run_ensemble(&rho0, false)?.stats;
        let series = stats.lyapunov.as_ref().expect("monitored");
        let literal = check_decay(
            &stats.times,
            &series.mean,
            series.sem.as_deref(),
            r,
            BoundKind::Equality,
            v0,
            5.0 / r,
        );
        out.push(check(
            &format!("C2 theta={tag}"),
            literal.pass,
            format!("E V = exp(-r t) V0, {}", verdict_detail(&literal)),
        ));
        // The mean decays at twice the certified rate. Checked over five
        // decay times of that rate; later the mean is carried by rare
        // trajectories and the sample SEM understates the error.
        let doubled = check_decay(
            &stats.times,
            &series.mean,
            series.sem.as_deref(),
            2.0 * r,
            BoundKind::Equality,
            v0,
            5.0 / (2.0 * r),
        );
        out.push(check(
            &format!("C2b theta={tag}"),
            doubled.pass,
            format!("E V = exp(-2 r t) V0, {}", verdict_detail(&doubled)),
        ));
    }
    Ok(out)
}

fn c3_open_loop() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let qubit = {
        let k = DVector::from_vec(vec![C64::new(0.3f64.sqrt(), 0.0), C64::new(0.0, 0.7f64.sqrt())]);
        DensityMatrix::pure(&k)?
    };
    let qutrit = {
        let k = DVector::from_vec(vec![
            C64::new(0.5f64.sqrt(), 0.0),
            C64::from_polar(0.3f64.sqrt(), 0.4),
            C64::from_polar(0.2f64.sqrt(), -1.1),
        ]);
        DensityMatrix::pure(&k)?
    };
    for (tag, lambdas, rho0, dt) in [
        ("n=2", vec![-1.0, 1.0], qubit, 1e-4),
        ("n=3", vec![-1.0, 0.3, 1.0], qutrit, 1e-3),
    ] {
        let system = QndSystem::new(HermitianOperator::diagonal(&lambdas)?)?;
        let eta = 1.0;
        let spec = LyapunovSpec::open_loop(system.spectrum(), eta)?;
        let r = spec.rate();
        let params = SimParams {
            dt,
            t_final: 50.0 / r,
            eta,
            n_traj: 200,
            seed: 3,
            ..SimParams::default()
        };
        let stride = ((0.05 / r) / dt).round().max(1.0) as usize;
        let spectrum = system.spectrum().clone();
        let sim = Simulation::new(system, Controller::Null, params)?
            .with_monitor(spec.clone())
            .with_stride(stride);
        let ensemble = sim.run_ensemble(&rho0, true)?;
        let v = check_exponential_bound(&ensemble.stats, &spec, spec.value(&rho0)?)?;
        out.push(check(&format!("C3 {tag} bound"), v.pass, verdict_detail(&v)));

        let n = spectrum.dim();
        let mut counts = vec![0usize; n];
        let mut worst_distance = 0.0f64;
        for record in &ensemble.trajectories {
            let distances = spectrum
                .projectors()
                .iter()
                .map(|p| trace_distance(&record.terminal_state, p))
                .collect::<Result<Vec<f64>>>()?;
            let (ell, d) = distances
                .iter()
                .copied()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("non-empty spectrum");
            counts[ell] += 1;
            worst_distance = worst_distance.max(d);
        }
        out.push(check(
            &format!("C3 {tag} selection"),
            worst_distance <= SELECTION_TOL,
            format!("largest terminal trace distance {worst_distance:.3e} (tol {SELECTION_TOL:e})"),
        ));
        let probabilities = spectrum.populations(&rho0)?;
        let total = ensemble.trajectories.len() as f64;
        let mut freq_ok = true;
        let mut detail = Vec::new();
        for (ell, &p) in probabilities.iter().enumerate() {
            let freq = counts[ell] as f64 / total;
            let sem = (p * (1.0 - p) / total).sqrt();
            freq_ok &= (freq - p).abs() <= BINOMIAL_SEMS * sem;
            detail.push(format!("{freq:.3} vs {p:.3}"));
        }
        out.push(check(
            &format!("C3 {tag} frequencies"),
            freq_ok,
            format!("[{}] within {BINOMIAL_SEMS} binomial SEM", detail.join(", ")),
        ));
    }
    Ok(out)
}

/// Constant-gain feedback through `sigma_z` on the qubit measurement.
fn sigma_z_feedback_run(rho0: &DensityMatrix, params: &SimParams, index: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let l = HermitianOperator::qubit_measurement(params.gamma);
    let f_op = HermitianOperator::sigma_z();
    let mut noise = NoiseStream::new(params.seed, index, params.dt);
    let mut closed = rho0.clone();
    let mut open = rho0.clone();
    let mut deviation = 0.0f64;
    let mut gap = 0.0f64;
    let p0 = closed.matrix()[(0, 0)].re;
    let mut excited = vec![p0];
    for _ in 0..params.n_steps() {
        let dw = noise.next_increment();
        closed = step_closed_expanded(&closed, &l, &f_op, 0.3, 0.2, params, dw)?.state;
        open = step_open_loop(&open, &l, params, dw)?.state;
        let p = closed.matrix()[(0, 0)].re;
        deviation = deviation.max((p - p0).abs());
        gap = gap
            .max((p - open.matrix()[(0, 0)].re).abs())
            .max((closed.matrix()[(1, 1)].re - open.matrix()[(1, 1)].re).abs());
        excited.push(p);
    }
    Ok((vec![deviation, gap], excited))
}

fn c4_obstruction() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let states: Vec<DensityMatrix> = (0..3).map(|_| random_density(&mut rng, 2)).collect();
    let base = SimParams {
        t_final: 1.0,
        eta: 0.5,
        gamma: 1.0,
        seed: 4,
        ..SimParams::default()
    };

    // Literal pathwise slope bound at two step sizes.
    let mut literal_ok = true;
    let mut shrink_ok = true;
    let mut detail = Vec::new();
    for (k, rho0) in states.iter().enumerate() {
        let mut devs = Vec::new();
        for dt in [1e-3, 5e-4] {
            let p = SimParams { dt, ..base.clone() };
            let (stats, _) = sigma_z_feedback_run(rho0, &p, k as u64)?;
            literal_ok &= stats[0] <= 5.0 * dt * p.t_final;
            devs.push(stats[0]);
        }
        shrink_ok &= devs[0] >= 2.0 * devs[1];
        detail.push(format!("{:.3e}/{:.3e}", devs[0], devs[1]));
    }
    out.push(check(
        "C4",
        literal_ok && shrink_ok,
        format!(
            "max |p(t) - p(0)| at dt = 1e-3/5e-4: [{}], bound 5 dt t_final = 5e-3/2.5e-3",
            detail.join(", ")
        ),
    ));

    // Populations are martingales: the ensemble mean stays put.
    let p = SimParams {
        dt: 1e-3,
        n_traj: 400,
        ..base.clone()
    };
    let runs = (0..p.n_traj as u64)
        .map(|i| sigma_z_feedback_run(&states[0], &p, i).map(|r| r.1))
        .collect::<Result<Vec<_>>>()?;
    let stats = SeriesStats::from_samples(&runs);
    let sem = stats.sem.as_ref().expect("many runs");
    let p0 = states[0].matrix()[(0, 0)].re;
    let worst = stats
        .mean
        .iter()
        .zip(sem)
        .skip(1)
        .map(|(m, s)| (m - p0).abs() / s)
        .fold(0.0f64, f64::max);
    out.push(check(
        "C4b",
        worst <= 4.0,
        format!(
            "ensemble-mean population drift at most {worst:.2} SEM over {} runs",
            p.n_traj
        ),
    ));

    // Feedback through sigma_z leaves populations exactly as in open loop.
    let mut gap = 0.0f64;
    for (k, rho0) in states.iter().enumerate() {
        let p = SimParams {
            dt: 1e-3,
            ..base.clone()
        };
        gap = gap.max(sigma_z_feedback_run(rho0, &p, k as u64)?.0[1]);
    }
    out.push(check(
        "C4c",
        gap <= 1e-12,
        format!("closed-loop vs open-loop populations under shared noise differ by {gap:.1e}"),
    ));

    let spectrum = qnd_spectrum(&HermitianOperator::qubit_measurement(1.0))?;
    let z_blocks = (0..2)
        .map(|l| lemma2_invariance_witness(&HermitianOperator::sigma_z(), l, &spectrum))
        .collect::<Result<Vec<bool>>>()?;
    let y_blocks = (0..2)
        .map(|l| lemma2_invariance_witness(&HermitianOperator::sigma_y(), l, &spectrum))
        .collect::<Result<Vec<bool>>>()?;
    out.push(check(
        "C4d",
        z_blocks.iter().all(|&b| b) && y_blocks.iter().all(|&b| !b),
        format!("witness sigma_z {z_blocks:?}, sigma_y {y_blocks:?}"),
    ));
    Ok(out)
}

/// Mean terminal trace distance between the two steppers under shared noise.
fn stepper_gap(controller: &Controller, dt: f64) -> Result<f64> {
    let params = SimParams {
        dt,
        t_final: 2.0,
        eta: 0.5,
        gamma: 1.0,
        seed: 5,
        ..SimParams::default()
    };
    let l = HermitianOperator::qubit_measurement(params.gamma);
    let actuator = controller.actuator().expect("closed loop");
    let rho0 = from_bloch(&BlochVector::new(0.3, -0.2, 0.1)?)?;
    let n_traj = 4;
    let mut total = 0.0;
    for index in 0..n_traj {
        let mut noise = NoiseStream::new(params.seed, index, dt);
        let mut a = rho0.clone();
        let mut b = rho0.clone();
        for _ in 0..params.n_steps() {
            let dw = noise.next_increment();
            let (fa, ka) = controller.gains(&to_bloch(&a)?, params.eta, params.gamma);
            let (fb, kb) = controller.gains(&to_bloch(&b)?, params.eta, params.gamma);
            a = step_closed_expanded(&a, &l, &actuator, fa, ka, &params, dw)?.state;
            b = step_closed_propagator(&b, &l, &actuator, fb, kb, &params, dw)?.state;
        }
        total += trace_distance(&a, &b)?;
    }
    Ok(total / n_traj as f64)
}

fn c5_stepper_equivalence() -> Result<Vec<Check>> {
    let controllers = [
        ("static(pi/2,0)", Controller::static_output(FRAC_PI_2, 0.0)?),
        ("static(pi/4,0.7)", Controller::static_output(FRAC_PI_4, 0.7)?),
        (
            "adaptive(e)",
            Controller::AdaptiveQnd {
                target: Target::Excited,
            },
        ),
        ("adaptive(g)", Controller::AdaptiveQnd { target: Target::Ground }),
        ("smooth(1,0.5)", Controller::smooth_state(1.0, 0.5, 0.5)?),
    ];
    let dts = [1e-3, 5e-4, 2.5e-4];
    let mut out = Vec::new();
    for (tag, controller) in controllers {
        let gaps = dts
            .iter()
            .map(|&dt| stepper_gap(&controller, dt))
            .collect::<Result<Vec<f64>>>()?;
        let c_fit = gaps[0].max(ROUNDOFF_FLOOR) / dts[0];
        let mut pass = true;
        for k in 1..dts.len() {
            pass &= gaps[k] <= (c_fit * dts[k]).max(ROUNDOFF_FLOOR);
            if gaps[k - 1] > ROUNDOFF_FLOOR {
                pass &= gaps[k - 1] / gaps[k] >= HALVING_RATIO;
            }
        }
        out.push(check(
            &format!("C5 {tag}"),
            pass,
            format!(
                "terminal distance {:.2e}, {:.2e}, {:.2e} at dt = 1e-3, 5e-4, 2.5e-4; C = {c_fit:.2e}",
                gaps[0], gaps[1], gaps[2]
            ),
        ));
    }
    Ok(out)
}

const MC_SAMPLES: usize = 20_000;
const FD_POINTS: usize = 1000;

fn c6_generators() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let eta = 0.5;

    // Adaptive feedback against the (x, y, xi) closed form.
    let params = SimParams {
        dt: 1e-4,
        eta,
        gamma: 1.0,
        seed: 6,
        ..SimParams::default()
    };
    let adaptive = qubit_sim(
        Controller::AdaptiveQnd {
            target: Target::Excited,
        },
        params.clone(),
    )?;
    let spec = LyapunovSpec::adaptive(Target::Excited, eta, 1.0)?;
    let mut hits = 0;
    let mut worst_z = 0.0f64;
    for _ in 0..20 {
        let s = random_xyxi(&mut rng);
        let rho = density_from_xyxi(s)?;
        let est = mc_generator_estimate(&adaptive, &rho, &spec, MC_SAMPLES)?;
        let exact = generator_adaptive_xyxi(
            &ReducedState::XYXi {
                x: s[0],
                y: s[1],
                xi: s[2],
            },
            eta,
            1.0,
        )?;
        hits += usize::from(est.contains(exact));
        worst_z = worst_z.max((est.estimate - exact).abs() / est.sem);
    }
    out.push(check(
        "C6 adaptive MC",
        hits == 20,
        format!("{hits}/20 intervals contain the closed form, worst |z| = {worst_z:.2}"),
    ));

    // Open loop on a qutrit against the xi closed form.
    let lambdas = [-1.0, 0.3, 1.0];
    let system = QndSystem::new(HermitianOperator::diagonal(&lambdas)?)?;
    let spectrum = system.spectrum().clone();
    let open = Simulation::new(system, Controller::Null, params.clone())?;
    let spec_open = LyapunovSpec::open_loop(&spectrum, eta)?;
    let mut hits = 0;
    let mut worst_z = 0.0f64;
    for _ in 0..20 {
        let rho = random_density(&mut rng, 3);
        let est = mc_generator_estimate(&open, &rho, &spec_open, MC_SAMPLES)?;
        let exact = generator_openloop_xi(&ReducedState::from_density(&rho, &spectrum)?, &lambdas, eta)?;
        hits += usize::from(est.contains(exact));
        worst_z = worst_z.max((est.estimate - exact).abs() / est.sem);
    }
    out.push(check(
        "C6 open-loop MC",
        hits == 20,
        format!(
            "{hits}/20 intervals contain the closed form, worst |z| = {worst_z:.2}, delta = {GENERATOR_SUBSTEPS} dt"
        ),
    ));

    // Finite differences of V along the full SME coefficients.
    let mut worst = 0.0f64;
    for _ in 0..FD_POINTS {
        let s = random_xyxi(&mut rng);
        let fd = full_generator_fd(&adaptive, &density_from_xyxi(s)?, &spec, 1e-4)?;
        let exact = generator_adaptive_xyxi(
            &ReducedState::XYXi {
                x: s[0],
                y: s[1],
                xi: s[2],
            },
            eta,
            1.0,
        )?;
        worst = worst.max((fd - exact).abs());
    }
    for _ in 0..FD_POINTS {
        let rho = random_density(&mut rng, 3);
        let fd = full_generator_fd(&open, &rho, &spec_open, 1e-4)?;
        let exact = generator_openloop_xi(&ReducedState::from_density(&rho, &spectrum)?, &lambdas, eta)?;
        worst = worst.max((fd - exact).abs());
    }
    out.push(check(
        "C6 full-SME FD",
        worst <= FD_TOL,
        format!("max deviation {worst:.2e} over {} points", 2 * FD_POINTS),
    ));

    // Finite differences on the reduced (x, y, xi) chart.
    let v = |p: &[f64]| p[2].max(0.0);
    let mut worst = 0.0f64;
    for _ in 0..FD_POINTS {
        let s = random_xyxi(&mut rng);
        let (mu, sigma) = xyxi_sde_coefficients(s, eta, 1.0);
        let fd = fd_generator(&v, &s, &mu, &sigma, 1e-3);
        let exact = generator_adaptive_xyxi(
            &ReducedState::XYXi {
                x: s[0],
                y: s[1],
                xi: s[2],
            },
            eta,
            1.0,
        )?;
        worst = worst.max((fd - exact).abs());
    }
    out.push(check(
        "C6 reduced FD",
        worst <= FD_TOL,
        format!("max deviation {worst:.2e} over {FD_POINTS} points"),
    ));

    let at_target = generator_adaptive_xyxi(&ReducedState::xyxi(0.0, 0.0, 0.0)?, eta, 1.0)?;
    let mixed_adaptive = generator_adaptive_xyxi(
        &ReducedState::from_bloch(&BlochVector::new(0.0, 0.0, 0.0)?, Target::Excited),
        0.5,
        1.0,
    )?;
    let mixed_open = generator_openloop_xi(&ReducedState::xi(vec![0.5f64.sqrt(); 2])?, &[-1.0, 1.0], 0.5)?;
    out.push(check(
        "C6 examples",
        at_target == 0.0 && (mixed_adaptive + 0.125).abs() < 1e-12 && (mixed_open + 0.5).abs() < 1e-12,
        format!("target {at_target}, adaptive at I/2 {mixed_adaptive}, open loop at I/2 {mixed_open}"),
    ));
    Ok(out)
}

fn c7_decoherence_plateaus() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (tag, gamma_dec, lo, hi) in [
        ("0", 0.0, 0.995, 1.0),
        ("G/100", 0.01, 0.95, 1.0),
        ("G/10", 0.1, 0.65, 0.85),
    ] {
        let params = SimParams {
            dt: 1e-4,
            t_final: 100.0,
            eta: 0.5,
            gamma: 1.0,
            gamma_dec,
            n_traj: 100,
            seed: 7,
        };
        let spec = LyapunovSpec::adaptive(Target::Excited, params.eta, params.gamma)?;
        let sim = qubit_sim(
            Controller::AdaptiveQnd {
                target: Target::Excited,
            },
            params,
        )?
        .with_monitor(spec)
        .with_stride(1000);
        let stats = sim.run_ensemble(&DensityMatrix::maximally_mixed(2), false)?.stats;
        let window: Vec<usize> = (0..stats.times.len())
            .filter(|&k| stats.times[k] >= PLATEAU_WINDOW.0 && stats.times[k] <= PLATEAU_WINDOW.1)
            .collect();
        let average = |series: &[f64]| window.iter().map(|&k| series[k]).sum::<f64>() / window.len() as f64;
        let z = average(&stats.z.as_ref().expect("qubit").mean);
        let v = average(&stats.lyapunov.as_ref().expect("monitored").mean);
        let implied = 1.0 - v * v;
        out.push(check(
            &format!("C7 gamma_dec={tag}"),
            (lo..=hi).contains(&z),
            format!("plateau mean z {z:.4}, accept [{lo}, {hi}]"),
        ));
        out.push(check(
            &format!("C7b gamma_dec={tag}"),
            (lo..=hi).contains(&implied),
            format!("1 - (mean V)^2 = {implied:.4} with mean V {v:.4}, accept [{lo}, {hi}]"),
        ));
    }
    Ok(out)
}

fn run_property<S: Strategy>(
    label: &str,
    strategy: S,
    test: impl Fn(S::Value) -> std::result::Result<(), TestCaseError>,
) -> Check {
    let mut runner = TestRunner::new(Config {
        cases: 256,
        failure_persistence: None,
        ..Config::default()
    });
    match runner.run(&strategy, test) {
        Ok(()) => check(label, true, "256 cases"),
        Err(e) => check(label, false, format!("{e}")),
    }
}

fn hermitian_defect(m: &CMatrix) -> f64 {
    (m - m.adjoint()).iter().map(|v| v.norm()).fold(0.0, f64::max)
}

fn c8_invariants() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let controllers = [
        Controller::Null,
        Controller::StaticOutput {
            theta_bar: FRAC_PI_4,
            alpha_bar: 0.3,
        },
        Controller::AdaptiveQnd {
            target: Target::Excited,
        },
        Controller::AdaptiveQnd { target: Target::Ground },
        Controller::SmoothState { alpha: 1.0, beta: 0.5 },
    ];

    out.push(run_property(
        "C8 step invariants",
        (
            any::<u64>(),
            0usize..5,
            0.05f64..=1.0,
            0.0f64..0.2,
            1e-5f64..1e-2,
            prop::bool::ANY,
        ),
        |(seed, which, eta, gamma_dec, dt, propagator)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = SimParams {
                dt,
                eta,
                gamma_dec,
                seed,
                ..SimParams::default()
            };
            let stepper = if propagator {
                Stepper::Propagator
            } else {
                Stepper::Expanded
            };
            let sim = qubit_sim(controllers[which], params).unwrap().with_stepper(stepper);
            let rho0 = random_density(&mut rng, 2);
            let mut noise = NoiseStream::new(seed, 0, dt);
            let mut rho = rho0;
            for _ in 0..20 {
                rho = sim.evolve(&rho, 1, || noise.next_increment()).unwrap();
                let m = rho.matrix();
                prop_assert!((m.trace().re - 1.0).abs() < 1e-12 && m.trace().im.abs() < 1e-12);
                prop_assert!(hermitian_defect(m) < 1e-12);
                prop_assert!(hermitian_eigen(m).0.iter().all(|&l| l >= -1e-12));
            }
            Ok(())
        },
    ));

    out.push(run_property("C8 D and M", (any::<u64>(), 2usize..=4), |(seed, n)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = random_hermitian(&mut rng, n);
        let rho = random_density(&mut rng, n);
        for m in [lindblad_d(&l, &rho).unwrap(), measurement_m(&l, &rho).unwrap()] {
            prop_assert!(m.trace().norm() < 1e-12);
            prop_assert!(hermitian_defect(&m) < 1e-12);
        }
        Ok(())
    }));

    out.push(run_property(
        "C8 QND fixed points",
        (any::<u64>(), 2usize..=4, -3.0f64..3.0, 0.1f64..=1.0),
        |(seed, n, dw, eta)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = HermitianOperator::new(random_hermitian(&mut rng, n)).unwrap();
            let spectrum = qnd_spectrum(&l).unwrap();
            let params = SimParams {
                dt: 1e-3,
                eta,
                ..SimParams::default()
            };
            for p in spectrum.projectors() {
                let next = step_open_loop(p, &l, &params, dw * params.dt.sqrt()).unwrap().state;
                let gap = (next.matrix() - p.matrix())
                    .iter()
                    .map(|v| v.norm())
                    .fold(0.0, f64::max);
                prop_assert!(gap < 1e-10, "projector moved by {gap}");
            }
            Ok(())
        },
    ));

    out.push(run_property(
        "C8 z-only gains",
        (
            -1.0f64..1.0,
            0.0f64..std::f64::consts::TAU,
            0.0f64..=1.0,
            0.0f64..=1.0,
            0.05f64..=1.0,
            prop::bool::ANY,
        ),
        |(z, phase, a, b, eta, ground)| {
            let target = if ground { Target::Ground } else { Target::Excited };
            let controller = Controller::AdaptiveQnd { target };
            let radius = (1.0 - z * z).sqrt();
            let at = |r: f64| {
                let b = BlochVector::new(r * phase.cos(), r * phase.sin(), z).unwrap();
                controller.gains(&b, eta, 1.0)
            };
            prop_assert_eq!(at(a * radius), at(b * radius));
            Ok(())
        },
    ));

    // Strong coupling of the reduced xi SDE to the full SME.
    let lambdas = vec![-1.0, 0.3, 1.0];
    let system = QndSystem::new(HermitianOperator::diagonal(&lambdas)?)?;
    let spectrum = system.spectrum().clone();
    let rho0 = {
        let k = DVector::from_vec(vec![
            C64::new(0.5f64.sqrt(), 0.0),
            C64::new(0.3f64.sqrt(), 0.0),
            C64::new(0.2f64.sqrt(), 0.0),
        ]);
        DensityMatrix::pure(&k)?
    };
    let mut errors = Vec::new();
    for dt in [1e-3, 5e-4, 2.5e-4] {
        let params = SimParams {
            dt,
            t_final: 2.0,
            eta: 1.0,
            seed: 8,
            ..SimParams::default()
        };
        let sim = Simulation::new(system.clone(), Controller::Null, params.clone())?.with_stride(1);
        let initial = ReducedState::from_density(&rho0, &spectrum)?;
        let n_traj = 32;
        let mut total = 0.0;
        for index in 0..n_traj {
            let full = sim.run_trajectory(&rho0, index)?;
            let reduced = simulate_reduced(
                &ReducedSystem::Lemma1Xi {
                    eigenvalues: lambdas.clone(),
                },
                &initial,
                &params,
                index,
                1,
            )?;
            let mut worst = 0.0f64;
            for (pops, state) in full.populations.iter().zip(&reduced.states) {
                for (p, x) in pops.iter().zip(state.coordinates()) {
                    worst = worst.max((p.max(0.0).sqrt() - x).abs());
                }
            }
            total += worst;
        }
        errors.push(total / n_traj as f64);
    }
    let ratios = [errors[0] / errors[1], errors[1] / errors[2]];
    out.push(check(
        "C8 reduced-vs-full coupling",
        ratios.iter().all(|&q| q > 1.0),
        format!(
            "mean max |xi_red - sqrt(p)| {:.2e}, {:.2e}, {:.2e} at dt = 1e-3, 5e-4, 2.5e-4 (ratios {:.2}, {:.2})",
            errors[0], errors[1], errors[2], ratios[0], ratios[1]
        ),
    ));
    Ok(out)
}
