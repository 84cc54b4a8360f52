//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! Run with `cargo test -p sddej-cli --test acceptance`.

#[path = "../../core/tests/support/flat_reference.rs"]
mod flat_reference;

use std::f64::consts::{FRAC_PI_3, PI, TAU};
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use sddej::drivers::{
    deterministic_integrator, sample_brownian, sample_poisson_schedule, DriverPath, JumpSchedule, MarkLaw,
    SnapPolicy,
};
use sddej::frame_bundle::{check_nabla_h_horizontal, lift_discrepancy, lift_path, solve_lifted_ddej, FramePoint};
use sddej::manifold::{euclidean, halfplane, sphere2, ChartPoint, ManifoldSpec, VectorFieldSpec};
use sddej::solver::{marcus_jump, solve_ddej, solve_sddej, EquationSpec, Scheme, SolverConfig};
use sddej::transport::{concat_transport, metric_norm, transport_segment, JumpFill, PathSegment, PiecewisePath};
use sddej_cli::config::RunConfig;
use sddej_cli::modes::{run_config, Mode, Options, Summary};

// Tolerances, one block per criterion.
const FLAT_TOL: f64 = 1e-9;
const FLAT_CASES: u64 = 20;
const ISOMETRY_TOL: f64 = 1e-6;
const COCYCLE_TOL: f64 = 1e-8;
const REVERSAL_TOL: f64 = 1e-8;
const HOLONOMY_TOL: f64 = 1e-6;
const HOLONOMY_STEPS: usize = 10_000;
const HOLONOMY_MIN_ORDER: f64 = 3.0;
const EXPM_TOL: f64 = 1e-8;
const ZERO_MARK_CURVED_TOL: f64 = 1e-10;
const LIFT_DET_TOL: f64 = 1e-4;
const LIFT_STO_TOL: f64 = 1e-3;
const LIFT_STO_PATHS: usize = 20;
const NABLA_RATIO: (f64, f64) = (0.4, 0.6);
const NABLA_POINTS: usize = 10;
const MC_SEEDS: u64 = 10_000;
const VARIANCE_REL_TOL: f64 = 0.05;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn dv(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

fn flat_oracle() -> Outcome {
    let errors: Vec<f64> = (0..FLAT_CASES)
        .into_par_iter()
        .map(|seed| {
            let case = flat_reference::random_case(1000 + seed, 1e-3);
            let reference = case.problem.solve();
            let sol = solve_sddej(&case.equation, &case.driver, &case.config).unwrap();
            let mut worst = 0.0_f64;
            for (i, node) in sol.nodes().iter().enumerate() {
                worst = worst.max((&node.x - dv(&reference.post[i])).amax());
                match (sol.left(i), &reference.left[i]) {
                    (Some(l), Some(r)) => worst = worst.max((&l.x - dv(r)).amax()),
                    (None, None) => {}
                    _ => return f64::INFINITY,
                }
            }
            worst
        })
        .collect();
    let worst = errors.iter().copied().fold(0.0, f64::max);
    outcome(
        worst <= FLAT_TOL,
        format!("{FLAT_CASES} random flat configs, max sup error {worst:.2e} (tol {FLAT_TOL:.0e})"),
    )
}

/// A chart line of metric length 1 from a random point, sampled at step 1e-3.
fn unit_curve(m: &ManifoldSpec, rng: &mut ChaCha8Rng) -> PathSegment {
    let x0 = if m.name() == "sphere2" {
        dv(&[rng.random_range(1.1..2.0), rng.random_range(-PI..PI)])
    } else {
        dv(&[rng.random_range(-1.0..1.0), rng.random_range(1.0..2.0)])
    };
    // |dy| stays below y so the half-plane curve keeps clear of the boundary
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let dir = dv(&[sign * rng.random_range(0.5..1.0), rng.random_range(-0.5..1.0)]);
    let u = &dir / metric_norm(m, &x0, &dir);
    PathSegment::sample(0.0, 1.0, 1000, |t| (&x0 + &u * t, u.clone())).unwrap()
}

fn transport_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut iso, mut cocycle, mut reversal) = (0.0_f64, 0.0_f64, 0.0_f64);
    for m in [sphere2(), halfplane()] {
        for _ in 0..10 {
            let seg = unit_curve(&m, &mut rng);
            let p = transport_segment(&m, &seg).unwrap();
            for _ in 0..3 {
                let v = dv(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
                let before = metric_norm(&m, seg.start(), &v);
                let after = metric_norm(&m, seg.end(), &(&p.matrix * &v));
                iso = iso.max((after / before - 1.0).abs());
            }
            let back = transport_segment(&m, &seg.reversed()).unwrap();
            reversal = reversal.max((back.matrix * &p.matrix - DMatrix::identity(2, 2)).amax());

            // cocycle on a path with a fill in the middle
            let (a, b) = (seg.restrict(0.0, 0.5).unwrap(), seg.restrict(0.5, 1.0).unwrap());
            let fill = PathSegment::sample(0.0, 1.0, 64, |_| (a.end().clone(), DVector::zeros(2))).unwrap();
            let path = PiecewisePath::new(vec![a, b], vec![JumpFill::new(1, fill).unwrap()], vec![0.5]).unwrap();
            let (s, t, u) = (rng.random_range(0.0..0.4), rng.random_range(0.4..0.7), rng.random_range(0.7..1.0));
            let whole = concat_transport(&m, &path, s, u).unwrap();
            let split = concat_transport(&m, &path, s, t).unwrap().then(&concat_transport(&m, &path, t, u).unwrap());
            cocycle = cocycle.max((whole.matrix - split.matrix).amax());
        }
    }
    outcome(
        iso <= ISOMETRY_TOL && cocycle <= COCYCLE_TOL && reversal <= REVERSAL_TOL,
        format!("sphere2+halfplane: isometry {iso:.2e}, cocycle {cocycle:.2e}, reversal {reversal:.2e}"),
    )
}

fn holonomy_angle(steps: usize) -> f64 {
    let theta = FRAC_PI_3;
    let seg = PathSegment::sample(0.0, 1.0, steps, |t| (dv(&[theta, TAU * t]), dv(&[0.0, TAU]))).unwrap();
    let p = transport_segment(&sphere2(), &seg).unwrap().matrix;
    // orthonormal gauge diag(1, sin θ)
    let q00 = p[(0, 0)];
    let q10 = theta.sin() * p[(1, 0)];
    q10.atan2(q00).rem_euclid(TAU)
}

fn holonomy() -> Outcome {
    let expected = (-TAU * FRAC_PI_3.cos()).rem_euclid(TAU);
    let err = |n: usize| {
        let d = (holonomy_angle(n) - expected).rem_euclid(TAU);
        d.min(TAU - d)
    };
    let fine = err(HOLONOMY_STEPS);
    let (e1, e2, e3) = (err(16), err(32), err(64));
    let order = ((e1 / e2).log2()).min((e2 / e3).log2());
    outcome(
        fine <= HOLONOMY_TOL && order >= HOLONOMY_MIN_ORDER,
        format!("angle error {fine:.2e} at {HOLONOMY_STEPS} steps, observed order {order:.2} (16/32/64 steps)"),
    )
}

/// `exp(A)` by scaling and squaring of the Taylor series.
fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let scaled = a / 256.0;
    let mut term = DMatrix::identity(n, n);
    let mut sum = term.clone();
    for k in 1..25 {
        term = &term * &scaled / k as f64;
        sum += &term;
    }
    for _ in 0..8 {
        sum = &sum * &sum;
    }
    sum
}

fn sphere_field(entries: &[f64]) -> VectorFieldSpec {
    VectorFieldSpec::affine(DMatrix::from_row_slice(2, 2, &entries[..4]), dv(&entries[4..6]))
}

fn sphere_history(delay: f64) -> PathSegment {
    PathSegment::sample(-delay, 0.0, 20, |t| (dv(&[1.2 + 0.1 * t, 0.3 + 0.5 * t]), dv(&[0.1, 0.5]))).unwrap()
}

fn fills() -> Outcome {
    // stored fills bridge left limits exactly
    let eq = EquationSpec::new(
        sphere2(),
        vec![sphere_field(&[-0.4, 0.0, 0.1, 0.0, 0.48, 0.8]), sphere_field(&[0.0, 0.0, 0.0, 0.0, 0.2, 0.1])],
        0.5,
        sphere_history(0.5),
    )
    .unwrap();
    let mut exact = true;
    let mut count = 0;
    for seed in 0..5 {
        let law = MarkLaw::Uniform {
            low: vec![-0.4, -0.4],
            high: vec![0.4, 0.4],
        };
        let sched = sample_poisson_schedule(seed, 2.0, 3.0, &law, 1).unwrap();
        let driver = sample_brownian(seed, 1e-3, 3.0, 1).unwrap().with_schedule(&sched, SnapPolicy::Perturb).unwrap();
        let sol = solve_sddej(&eq, &driver, &SolverConfig::new(1e-3, 3.0, Scheme::HeunStratonovich)).unwrap();
        for (fill, &t) in sol.path().fills().iter().zip(sol.path().jump_times()) {
            let idx = sol.index_of(t).unwrap();
            exact &= fill.curve.start() == &sol.left(idx).unwrap().x && fill.curve.end() == &sol.nodes()[idx].x;
            count += 1;
        }
    }

    // zero marks: exact on flat space, tiny on the sphere
    let with_zero = |case: &flat_reference::FlatCase| {
        let m = case.driver.m();
        let mut times: Vec<f64> = case.driver.schedule().times().to_vec();
        let mut marks: Vec<Vec<f64>> = case.driver.schedule().marks().to_vec();
        let free = (1..case.driver.steps()).find(|k| !case.driver.jump_nodes().contains(k)).unwrap();
        let pos = times.partition_point(|&t| t < free as f64 * case.driver.step());
        times.insert(pos, free as f64 * case.driver.step());
        marks.insert(pos, vec![0.0; m + 1]);
        let sched = JumpSchedule::new(times, marks).unwrap();
        case.driver.clone().with_schedule(&sched, SnapPolicy::Reject).unwrap()
    };
    let mut flat_exact = true;
    for seed in 0..5 {
        let case = flat_reference::random_case(50 + seed, 1e-2);
        let a = solve_sddej(&case.equation, &case.driver, &case.config).unwrap();
        let b = solve_sddej(&case.equation, &with_zero(&case), &case.config).unwrap();
        flat_exact &= a.nodes().iter().zip(b.nodes()).all(|(p, q)| p.x == q.x);
    }
    let sphere_eq = EquationSpec::new(sphere2(), vec![sphere_field(&[-0.4, 0.0, 0.1, 0.0, 0.48, 0.8])], 0.5, sphere_history(0.5)).unwrap();
    let cfg = SolverConfig::new(1e-3, 3.0, Scheme::Rk4Deterministic);
    let plain = deterministic_integrator(&JumpSchedule::scalar(vec![1.0], vec![0.6]).unwrap(), 3.0, 1e-3).unwrap();
    let zero = deterministic_integrator(&JumpSchedule::scalar(vec![1.0, 1.7], vec![0.6, 0.0]).unwrap(), 3.0, 1e-3).unwrap();
    let a = solve_ddej(&sphere_eq, &plain, &cfg).unwrap();
    let b = solve_ddej(&sphere_eq, &zero, &cfg).unwrap();
    let curved = a.nodes().iter().zip(b.nodes()).map(|(p, q)| (&p.x - &q.x).amax()).fold(0.0, f64::max);

    // linear fields: the fill end point is a matrix exponential
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut expm_err = 0.0_f64;
    for _ in 0..10 {
        let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let z = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let j = rng.random_range(-1.5..1.5);
        let field = VectorFieldSpec::affine(a.clone(), DVector::zeros(3));
        let fill = marcus_jump(&euclidean(3).unwrap(), &[field], &dv(&[j]), &ChartPoint::new(z.clone()), 64, 1).unwrap();
        expm_err = expm_err.max((fill.curve.end() - expm(&(a * j)) * z).amax());
    }
    outcome(
        exact && flat_exact && curved <= ZERO_MARK_CURVED_TOL && expm_err <= EXPM_TOL,
        format!(
            "{count} fills exact: {exact}; zero mark flat exact: {flat_exact}, sphere {curved:.2e}; expm error {expm_err:.2e}"
        ),
    )
}

fn deterministic_lift(h: f64) -> f64 {
    let eq = EquationSpec::new(sphere2(), vec![sphere_field(&[-0.4, 0.0, 0.1, 0.0, 0.48, 0.8])], 0.5, sphere_history(0.5)).unwrap();
    let sched = JumpSchedule::scalar(vec![0.6, 1.0, 2.2], vec![0.7, -0.5, 0.4]).unwrap();
    let driver = deterministic_integrator(&sched, 3.0, h).unwrap();
    let cfg = SolverConfig::new(h, 3.0, Scheme::Rk4Deterministic);
    let p0 = FramePoint::new(
        ChartPoint::new(eq.initial_curve.start().clone()),
        DMatrix::from_row_slice(2, 2, &[1.0, 0.2, -0.1, 1.3]),
    )
    .unwrap();
    let base = solve_ddej(&eq, &driver, &cfg).unwrap();
    let lifted = solve_lifted_ddej(&eq, &p0, &driver, &cfg).unwrap();
    let bundle = lift_path(&eq.manifold, base.path(), &p0).unwrap();
    lift_discrepancy(&lifted, &bundle).unwrap().frame
}

fn lift_deterministic() -> Outcome {
    let d1 = deterministic_lift(1e-3);
    let d2 = deterministic_lift(5e-4);
    outcome(
        d1 <= LIFT_DET_TOL && d2 <= 0.5 * d1,
        format!("sphere2, 3 jumps: discrepancy {d1:.2e} at h=1e-3, {d2:.2e} at h=5e-4 (ratio {:.3})", d2 / d1),
    )
}

fn lift_stochastic() -> Outcome {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/sphere_stochastic.toml")).unwrap();
    let mut cfg = RunConfig::from_toml(&text, ".").unwrap();
    cfg.lift_check.steps = vec![1e-3, 5e-4];
    cfg.lift_check.paths = LIFT_STO_PATHS;
    cfg.output.trajectories = false;
    let dir = tempfile::tempdir().unwrap();
    let opts = Options {
        out: Some(dir.path().to_path_buf()),
        ..Options::default()
    };
    let report = run_config(Mode::LiftCheck, &cfg, &opts).unwrap();
    let Summary::LiftCheck(s) = report.summary else { unreachable!() };
    let (m1, m2) = (s.levels[0].frame_discrepancy, s.levels[1].frame_discrepancy);
    outcome(
        m1 <= LIFT_STO_TOL && m2 < m1,
        format!("{LIFT_STO_PATHS} paths, median discrepancy {m1:.2e} at h=1e-3, {m2:.2e} at h=5e-4"),
    )
}

fn nabla_h() -> Outcome {
    let m = sphere2();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ratios = Vec::new();
    for _ in 0..NABLA_POINTS {
        let mut entries = |_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (x, y) = (sphere_field(&entries(0)), sphere_field(&entries(1)));
        let base = ChartPoint::from_slice(&[rng.random_range(0.5..2.6), rng.random_range(-PI..PI)]);
        let frame = DMatrix::identity(2, 2) + DMatrix::from_fn(2, 2, |_, _| rng.random_range(-0.3..0.3));
        let p = FramePoint::new(base, frame).unwrap();
        let r1 = check_nabla_h_horizontal(&m, &x, &y, &p, 1e-3).unwrap();
        let r2 = check_nabla_h_horizontal(&m, &x, &y, &p, 5e-4).unwrap();
        ratios.push(r2 / r1);
    }
    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().copied().fold(0.0, f64::max);
    outcome(
        lo >= NABLA_RATIO.0 && hi <= NABLA_RATIO.1,
        format!("{NABLA_POINTS} points, residual ratio under ε-halving in [{lo:.3}, {hi:.3}]"),
    )
}

fn driver_laws() -> Outcome {
    let (horizon, step, rate) = (1.0, 0.01, 3.0);
    let law = MarkLaw::Gaussian {
        mean: vec![0.2, -0.1],
        cov: vec![vec![0.5, 0.1], vec![0.1, 0.3]],
    };
    let samples: Vec<(f64, usize, bool)> = (0..MC_SEEDS)
        .into_par_iter()
        .map(|seed| {
            let sched = sample_poisson_schedule(seed, rate, horizon, &law, 1).unwrap();
            let driver: DriverPath = sample_brownian(seed, step, horizon, 1)
                .unwrap()
                .with_schedule(&sched, SnapPolicy::Perturb)
                .unwrap();
            let terminal: f64 = driver.increments().iter().sum();
            let mut exact = true;
            for t in [0.0, 0.13, 0.5, 0.77, 1.0] {
                for i in 0..2 {
                    let jumps: f64 = driver
                        .schedule()
                        .times()
                        .iter()
                        .zip(driver.schedule().marks())
                        .filter(|(&tau, _)| tau <= t)
                        .map(|(_, mk)| mk[i])
                        .sum();
                    let expected = if i == 0 { t + jumps } else { driver.brownian(i, t) + jumps };
                    exact &= driver.value(i, t) == expected;
                }
            }
            (terminal, sched.len(), exact)
        })
        .collect();
    let n = MC_SEEDS as f64;
    let mean_b = samples.iter().map(|s| s.0).sum::<f64>() / n;
    let var_b = samples.iter().map(|s| (s.0 - mean_b).powi(2)).sum::<f64>() / (n - 1.0);
    let mean_n = samples.iter().map(|s| s.1 as f64).sum::<f64>() / n;
    let sigma = (rate * horizon / n).sqrt();
    let exact = samples.iter().all(|s| s.2);
    let var_ok = (var_b / horizon - 1.0).abs() <= VARIANCE_REL_TOL;
    let count_ok = (mean_n - rate * horizon).abs() <= 3.0 * sigma;
    outcome(
        var_ok && count_ok && exact,
        format!(
            "{MC_SEEDS} seeds: Var B_T = {var_b:.4} (T = {horizon}), mean N_T = {mean_n:.4} (λT = {}, 3σ = {:.4}), decomposition exact: {exact}",
            rate * horizon,
            3.0 * sigma
        ),
    )
}

fn determinism() -> Outcome {
    let config = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/sphere_stochastic.toml");
    let cfg = RunConfig::load(std::path::Path::new(config)).unwrap();
    let runs: Vec<Vec<u8>> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let opts = Options {
                out: Some(dir.path().to_path_buf()),
                ..Options::default()
            };
            run_config(Mode::Simulate, &cfg, &opts).unwrap();
            std::fs::read(dir.path().join("trajectory.csv")).unwrap()
        })
        .collect();
    outcome(
        runs[0] == runs[1] && !runs[0].is_empty(),
        format!("two simulate runs, {} bytes each, identical: {}", runs[0].len(), runs[0] == runs[1]),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("flat-space oracle equivalence", flat_oracle),
        ("transport isometry, cocycle, reversal", transport_properties),
        ("latitude holonomy", holonomy),
        ("jump fills", fills),
        ("lift theorem, deterministic", lift_deterministic),
        ("lift theorem, stochastic", lift_stochastic),
        ("horizontal covariant derivative", nabla_h),
        ("driver laws", driver_laws),
        ("byte-identical output", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !result.pass {
            failed += 1;
        }
        println!(
            "[{}] {}. {name}: {} ({:.1}s)",
            if result.pass { "PASS" } else { "FAIL" },
            i + 1,
            result.detail,
            started.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
