//! The five run modes. Each writes its artifacts into the output directory
//! and returns a report whose numbers can all be recomputed from them.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use sddej::drivers::{trajectory_seed, DriverPath};
use sddej::frame_bundle::{lift_discrepancy, lift_path, solve_lifted_sddej, FramePoint};
use sddej::manifold::{ChartPoint, ManifoldSpec};
use sddej::solver::{solve_sddej, EquationSpec, SolutionPath};
use sddej::transport::{transport_segment, PathSegment};

use crate::config::{check_halving, RunConfig, TransportConfig};
use crate::error::CliError;
use crate::output::{write_json, write_text, PathSidecar, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Simulate,
    LiftCheck,
    Transport,
    Convergence,
    Ensemble,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Simulate => "simulate",
            Mode::LiftCheck => "lift-check",
            Mode::Transport => "transport",
            Mode::Convergence => "convergence",
            Mode::Ensemble => "ensemble",
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Options {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub mode: &'static str,
    pub manifold: String,
    pub seed: u64,
    pub files: Vec<String>,
    pub warnings: Vec<String>,
    pub summary: Summary,
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Summary {
    Simulate(SimulateSummary),
    LiftCheck(LiftCheckSummary),
    Transport(TransportSummary),
    Convergence(ConvergenceSummary),
    Ensemble(EnsembleSummary),
}

#[derive(Debug, Serialize)]
pub struct SimulateSummary {
    pub steps: usize,
    pub jumps: usize,
    pub final_state: Vec<f64>,
    pub frame_determinant: DeterminantDrift,
}

/// Determinant of the running frame over the run. With a metric the
/// transport preserves the volume form, so `det U · √det g(x)` should stay
/// at its initial value; `volume_drift` is the largest relative change.
#[derive(Debug, Serialize)]
pub struct DeterminantDrift {
    pub min: f64,
    pub max: f64,
    pub volume_drift: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct LiftLevel {
    pub step: f64,
    /// Median over sampled paths of the max frame-entry discrepancy.
    pub frame_discrepancy: f64,
    pub frame_discrepancy_max: f64,
    pub base_discrepancy: f64,
    pub per_path: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct LiftCheckSummary {
    pub paths: usize,
    pub levels: Vec<LiftLevel>,
    /// Fine-to-coarse ratios of the median discrepancy.
    pub ratios: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct HolonomyLevel {
    pub steps: usize,
    pub angle: f64,
    pub error: f64,
    pub isometry_error: f64,
}

#[derive(Debug, Serialize)]
pub struct TransportSummary {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expected_angle: Option<f64>,
    pub levels: Vec<HolonomyLevel>,
    pub observed_orders: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Serialize)]
pub struct ConvergenceSummary {
    pub steps: Vec<f64>,
    /// Sup-norm distance between consecutive levels on the coarser nodes.
    pub distances: Vec<f64>,
    pub ratios: Vec<f64>,
    pub observed_orders: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct EnsembleSummary {
    pub size: usize,
    pub final_time: f64,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct Timings {
    total_seconds: f64,
}

struct Context<'a> {
    cfg: &'a RunConfig,
    seed: u64,
    out: PathBuf,
    files: Vec<String>,
}

impl Context<'_> {
    fn write(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        write_text(&self.out, name, text)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        write_json(&self.out, name, value)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn write_solution(&mut self, name: &str, eq: &EquationSpec, sol: &SolutionPath) -> Result<(), CliError> {
        let table = Trajectory::from_solution(sol, self.cfg.output.frames);
        self.write(&format!("{name}.csv"), &table.to_csv())?;
        let sidecar = PathSidecar::new(eq.manifold.name(), sol, &table.columns);
        self.write_json(&format!("{name}.json"), &sidecar)
    }
}

/// Loads `config` and runs `mode`, writing artifacts, `report.json` and
/// `timings.json` into the output directory.
pub fn run(mode: Mode, config: &Path, opts: &Options) -> Result<RunReport, CliError> {
    let cfg = RunConfig::load(config)?;
    run_config(mode, &cfg, opts)
}

pub fn run_config(mode: Mode, cfg: &RunConfig, opts: &Options) -> Result<RunReport, CliError> {
    let started = Instant::now();
    let out = opts
        .out
        .clone()
        .or_else(|| cfg.output.dir.as_ref().map(|d| cfg.base_dir.join(d)))
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Config(format!("cannot start thread pool: {e}")))?;
    let mut ctx = Context {
        cfg,
        seed: opts.seed.unwrap_or(cfg.seed),
        out,
        files: Vec::new(),
    };
    let manifold = cfg.build_manifold()?;
    let mut warnings = Vec::new();
    let summary = pool.install(|| match mode {
        Mode::Simulate => simulate(&mut ctx, &mut warnings).map(Summary::Simulate),
        Mode::LiftCheck => lift_check(&mut ctx, &mut warnings).map(Summary::LiftCheck),
        Mode::Transport => transport(&mut ctx, &manifold).map(Summary::Transport),
        Mode::Convergence => convergence(&mut ctx, &mut warnings).map(Summary::Convergence),
        Mode::Ensemble => ensemble(&mut ctx, &mut warnings).map(Summary::Ensemble),
    })?;
    let mut files = std::mem::take(&mut ctx.files);
    files.push("report.json".into());
    let report = RunReport {
        mode: mode.name(),
        manifold: manifold.name().to_string(),
        seed: ctx.seed,
        files,
        warnings,
        summary,
    };
    write_json(&ctx.out, "report.json", &report)?;
    write_json(
        &ctx.out,
        "timings.json",
        &Timings {
            total_seconds: started.elapsed().as_secs_f64(),
        },
    )?;
    Ok(report)
}

fn equation(ctx: &Context, warnings: &mut Vec<String>) -> Result<EquationSpec, CliError> {
    let eq = ctx.cfg.build_equation()?;
    warnings.extend(eq.warnings());
    Ok(eq)
}

fn solve(ctx: &Context, eq: &EquationSpec, driver: &DriverPath) -> Result<SolutionPath, CliError> {
    let cfg = ctx.cfg.solver_config(driver.step())?;
    Ok(solve_sddej(eq, driver, &cfg)?)
}

fn determinant_drift(m: &ManifoldSpec, sol: &SolutionPath) -> DeterminantDrift {
    let dets = sol.frame_determinants();
    let min = dets.iter().copied().fold(f64::INFINITY, f64::min);
    let max = dets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let volume = |x: &DVector<f64>| m.metric(x).map(|g| g.determinant().sqrt());
    let volume_drift = volume(&sol.nodes()[0].x).map(|v0| {
        sol.nodes()
            .iter()
            .zip(&dets)
            .map(|(s, d)| (d * volume(&s.x).unwrap() / v0 - 1.0).abs())
            .fold(0.0, f64::max)
    });
    DeterminantDrift { min, max, volume_drift }
}

fn simulate(ctx: &mut Context, warnings: &mut Vec<String>) -> Result<SimulateSummary, CliError> {
    let eq = equation(ctx, warnings)?;
    let step = ctx.cfg.solver_section()?.step;
    let driver = ctx.cfg.driver(ctx.seed, step)?;
    let sol = solve(ctx, &eq, &driver)?;
    ctx.write_solution("trajectory", &eq, &sol)?;
    Ok(SimulateSummary {
        steps: driver.steps(),
        jumps: sol.path().jump_times().len(),
        final_state: sol.final_state().x.iter().copied().collect(),
        frame_determinant: determinant_drift(&eq.manifold, &sol),
    })
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

fn step_tag(step: f64) -> String {
    format!("h{step}")
}

fn lift_check(ctx: &mut Context, warnings: &mut Vec<String>) -> Result<LiftCheckSummary, CliError> {
    let eq = equation(ctx, warnings)?;
    let cfg = ctx.cfg;
    let steps = if cfg.lift_check.steps.is_empty() {
        vec![cfg.solver_section()?.step]
    } else {
        cfg.lift_check.steps.clone()
    };
    check_halving(&steps)?;
    for &h in &steps {
        cfg.solver_config(h)?;
    }
    let paths = cfg.lift_check.paths;
    if paths == 0 {
        return Err(CliError::Config("lift_check.paths must be at least 1".into()));
    }
    let n = eq.manifold.dim();
    let p0 = FramePoint::new(ChartPoint::new(eq.initial_curve.start().clone()), cfg.initial_frame(n)?)?;

    struct PathRun {
        frame: Vec<f64>,
        base: Vec<f64>,
        tables: Vec<(String, String)>,
    }
    let write_tables = cfg.output.trajectories || paths == 1;
    let runs = (0..paths)
        .into_par_iter()
        .map(|j| -> Result<PathRun, CliError> {
            let seed = trajectory_seed(ctx.seed, j as u64);
            let drivers = cfg.refined_drivers(seed, &steps)?;
            let mut run = PathRun {
                frame: Vec::new(),
                base: Vec::new(),
                tables: Vec::new(),
            };
            for driver in &drivers {
                let scfg = cfg.solver_config(driver.step())?;
                let base = solve_sddej(&eq, driver, &scfg)?;
                let lifted = solve_lifted_sddej(&eq, &p0, driver, &scfg)?;
                let bundle = lift_path(&eq.manifold, base.path(), &p0)?;
                let d = lift_discrepancy(&lifted, &bundle)?;
                run.frame.push(d.frame);
                run.base.push(d.base);
                if write_tables {
                    let tag = if paths == 1 {
                        step_tag(driver.step())
                    } else {
                        format!("p{j}_{}", step_tag(driver.step()))
                    };
                    run.tables.push((format!("lifted_{tag}.csv"), Trajectory::from_solution(&lifted, true).to_csv()));
                    run.tables.push((format!("liftpath_{tag}.csv"), Trajectory::from_bundle(&bundle).to_csv()));
                }
            }
            Ok(run)
        })
        .collect::<Result<Vec<_>, _>>()?;
    for run in &runs {
        for (name, text) in &run.tables {
            ctx.write(name, text)?;
        }
    }
    let levels: Vec<LiftLevel> = steps
        .iter()
        .enumerate()
        .map(|(k, &step)| {
            let per_path: Vec<f64> = runs.iter().map(|r| r.frame[k]).collect();
            let base: Vec<f64> = runs.iter().map(|r| r.base[k]).collect();
            LiftLevel {
                step,
                frame_discrepancy: median(&per_path),
                frame_discrepancy_max: per_path.iter().copied().fold(0.0, f64::max),
                base_discrepancy: median(&base),
                per_path,
            }
        })
        .collect();
    let ratios = levels
        .windows(2)
        .map(|w| w[1].frame_discrepancy / w[0].frame_discrepancy)
        .collect();
    Ok(LiftCheckSummary { paths, levels, ratios })
}

/// Transport along `seg`, and its angle and isometry defect in the metric's
/// orthonormal gauge (2-dimensional manifolds with a metric).
fn gauge_rotation(m: &ManifoldSpec, seg: &PathSegment) -> Result<(DMatrix<f64>, Option<(f64, f64)>), CliError> {
    let p = transport_segment(m, seg)?;
    let gauge = |x: &DVector<f64>| m.metric(x).and_then(|g| g.cholesky()).map(|c| c.l().transpose());
    let rotation = match (gauge(seg.start()), gauge(seg.end())) {
        (Some(from), Some(to)) if m.dim() == 2 => {
            let q = to * &p.matrix * from.try_inverse().expect("Cholesky factor is invertible");
            let angle = q[(1, 0)].atan2(q[(0, 0)]).rem_euclid(TAU);
            let defect = (q.transpose() * &q - DMatrix::identity(2, 2)).amax();
            Some((angle, defect))
        }
        _ => None,
    };
    Ok((p.matrix, rotation))
}

fn wrapped(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    r.min(TAU - r)
}

fn transport(ctx: &mut Context, m: &ManifoldSpec) -> Result<TransportSummary, CliError> {
    let spec = ctx
        .cfg
        .transport
        .clone()
        .ok_or_else(|| CliError::Config("missing [transport] section".into()))?;
    match spec {
        TransportConfig::Latitude { theta, steps } => {
            if m.name() != "sphere2" {
                return Err(CliError::Config("latitude loops are defined on sphere2".into()));
            }
            if steps.is_empty() || steps.contains(&0) {
                return Err(CliError::Config("transport.steps needs positive step counts".into()));
            }
            let expected = (-TAU * theta.cos()).rem_euclid(TAU);
            let mut levels = Vec::new();
            let mut table = Trajectory {
                columns: vec!["steps".into(), "angle".into(), "error".into(), "isometry_error".into()],
                rows: Vec::new(),
            };
            for &n in &steps {
                let seg = PathSegment::sample(0.0, 1.0, n, |t| {
                    (DVector::from_column_slice(&[theta, TAU * t]), DVector::from_column_slice(&[0.0, TAU]))
                })?;
                let (_, rotation) = gauge_rotation(m, &seg)?;
                let (angle, isometry_error) = rotation.expect("sphere2 has a metric");
                let error = wrapped(angle - expected);
                table.rows.push(vec![n as f64, angle, error, isometry_error]);
                levels.push(HolonomyLevel {
                    steps: n,
                    angle,
                    error,
                    isometry_error,
                });
            }
            ctx.write("holonomy.csv", &table.to_csv())?;
            let observed_orders = levels
                .windows(2)
                .map(|w| (w[0].error / w[1].error).ln() / (w[1].steps as f64 / w[0].steps as f64).ln())
                .collect();
            Ok(TransportSummary {
                expected_angle: Some(expected),
                levels,
                observed_orders,
                matrix: None,
            })
        }
        TransportConfig::Polyline { points } => {
            let n = m.dim();
            if points.len() < 2 || points.iter().any(|p| p.len() != n) {
                return Err(CliError::Config(format!("polyline needs at least two points with {n} coordinates")));
            }
            let k = points.len() - 1;
            let times = (0..=k).map(|i| i as f64 / k as f64).collect();
            let seg = PathSegment::polygonal(times, points.iter().map(|p| DVector::from_column_slice(p)).collect())?;
            let (matrix, rotation) = gauge_rotation(m, &seg)?;
            let rows: Vec<Vec<f64>> = matrix.row_iter().map(|r| r.iter().copied().collect()).collect();
            let table = Trajectory {
                columns: (1..=n).map(|i| format!("p_{i}")).collect(),
                rows: rows.clone(),
            };
            ctx.write("transport.csv", &table.to_csv())?;
            Ok(TransportSummary {
                expected_angle: None,
                levels: rotation
                    .map(|(angle, isometry_error)| HolonomyLevel {
                        steps: k,
                        angle,
                        error: f64::NAN,
                        isometry_error,
                    })
                    .into_iter()
                    .collect(),
                observed_orders: Vec::new(),
                matrix: Some(rows),
            })
        }
    }
}

fn convergence(ctx: &mut Context, warnings: &mut Vec<String>) -> Result<ConvergenceSummary, CliError> {
    let eq = equation(ctx, warnings)?;
    let steps = ctx.cfg.convergence.steps.clone();
    if steps.len() < 2 {
        return Err(CliError::Config("convergence.steps needs at least two step sizes".into()));
    }
    for &h in &steps {
        ctx.cfg.solver_config(h)?;
    }
    let drivers = ctx.cfg.refined_drivers(ctx.seed, &steps)?;
    let sols = drivers
        .par_iter()
        .map(|d| solve(ctx, &eq, d))
        .collect::<Result<Vec<_>, _>>()?;
    for (sol, &h) in sols.iter().zip(&steps) {
        ctx.write_solution(&format!("trajectory_{}", step_tag(h)), &eq, sol)?;
    }
    let distances = sols
        .windows(2)
        .map(|w| w[0].sup_distance(&w[1]))
        .collect::<Result<Vec<_>, _>>()?;
    let ratios: Vec<f64> = distances.windows(2).map(|w| w[0] / w[1]).collect();
    let observed_orders = ratios.iter().map(|r| r.log2()).collect();
    Ok(ConvergenceSummary {
        steps,
        distances,
        ratios,
        observed_orders,
    })
}

fn ensemble(ctx: &mut Context, warnings: &mut Vec<String>) -> Result<EnsembleSummary, CliError> {
    let eq = equation(ctx, warnings)?;
    let size = ctx.cfg.ensemble.size;
    if size == 0 {
        return Err(CliError::Config("ensemble.size must be at least 1".into()));
    }
    let step = ctx.cfg.solver_section()?.step;
    ctx.cfg.solver_config(step)?;
    let write_each = ctx.cfg.output.trajectories;
    let frames = ctx.cfg.output.frames;
    let results = (0..size)
        .into_par_iter()
        .map(|i| -> Result<(Vec<f64>, Option<String>), CliError> {
            let seed = trajectory_seed(ctx.seed, i as u64);
            let driver = ctx.cfg.driver(seed, step)?;
            let sol = solve(ctx, &eq, &driver)?;
            let text = write_each.then(|| Trajectory::from_solution(&sol, frames).to_csv());
            Ok((sol.final_state().x.iter().copied().collect(), text))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let n = eq.manifold.dim();
    let width = (size - 1).to_string().len();
    let mut finals = Trajectory {
        columns: ["index", "seed"].into_iter().map(String::from).chain((1..=n).map(|i| format!("x_{i}"))).collect(),
        rows: Vec::with_capacity(size),
    };
    for (i, (x, text)) in results.iter().enumerate() {
        if let Some(text) = text {
            ctx.write(&format!("trajectory_{i:0width$}.csv"), text)?;
        }
        let mut row = vec![i as f64, trajectory_seed(ctx.seed, i as u64) as f64];
        row.extend_from_slice(x);
        finals.rows.push(row);
    }
    ctx.write("ensemble.csv", &finals.to_csv())?;
    let mut mean = vec![0.0; n];
    for (x, _) in &results {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= size as f64);
    let mut variance = vec![0.0; n];
    if size > 1 {
        for (x, _) in &results {
            for ((s, v), m) in variance.iter_mut().zip(x).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        variance.iter_mut().for_each(|s| *s /= (size - 1) as f64);
    }
    Ok(EnsembleSummary {
        size,
        final_time: ctx.cfg.solver_section()?.horizon,
        mean,
        variance,
    })
}
