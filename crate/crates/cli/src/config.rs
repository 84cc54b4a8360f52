//! The TOML run configuration and its translation into solver inputs.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use sddej::drivers::{sample_brownian, sample_driver, DriverPath, JumpSchedule, MarkLaw, SnapPolicy};
use sddej::manifold::{builtin_manifold, euclidean, ManifoldSpec, VectorFieldSpec};
use sddej::solver::{EquationSpec, Scheme, SolverConfig, DEFAULT_FICTITIOUS_STEPS};
use sddej::transport::PathSegment;

use crate::error::CliError;
use crate::output::Trajectory;

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub manifold: ManifoldConfig,
    #[serde(default)]
    pub fields: Vec<FieldConfig>,
    pub equation: Option<EquationConfig>,
    pub initial: Option<InitialConfig>,
    pub solver: Option<SolverSection>,
    #[serde(default)]
    pub driver: DriverConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub lift_check: LiftCheckConfig,
    pub transport: Option<TransportConfig>,
    #[serde(default)]
    pub convergence: ConvergenceConfig,
    #[serde(default)]
    pub output: OutputConfig,
    /// Directory of the config file; relative paths resolve against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldConfig {
    /// `euclidean`, `circle`, `sphere2` or `halfplane`.
    pub name: String,
    /// Dimension of `euclidean`.
    pub dim: Option<usize>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldConfig {
    Zero,
    Constant { value: Vec<f64> },
    Affine { matrix: Vec<Vec<f64>>, offset: Vec<f64> },
    /// `(x, y) ↦ (−y, x)`.
    Rotation,
    /// Rotation of the sphere about the x-axis, in polar coordinates.
    SphereXRotation { omega: f64 },
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EquationConfig {
    pub delay: f64,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialConfig {
    Constant { point: Vec<f64> },
    /// `β₀(t) = start + (t + d) velocity`.
    Linear { start: Vec<f64>, velocity: Vec<f64> },
    /// CSV with columns `t, x_1, …, x_n` covering `[−d, 0]`.
    File { path: PathBuf },
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub step: f64,
    pub horizon: f64,
    /// Defaults to RK4 without Brownian components and Heun otherwise.
    pub scheme: Option<Scheme>,
    #[serde(default = "default_fictitious_steps")]
    pub fictitious_steps: usize,
    #[serde(default)]
    pub metric_projection: bool,
}

fn default_fictitious_steps() -> usize {
    DEFAULT_FICTITIOUS_STEPS
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(untagged)]
pub enum Mark {
    Scalar(f64),
    Vector(Vec<f64>),
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct JumpConfig {
    pub time: f64,
    pub mark: Mark,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriverConfig {
    /// Inline jump schedule, optionally with `brownian` Brownian components.
    Deterministic {
        #[serde(default)]
        brownian: usize,
        #[serde(default)]
        jumps: Vec<JumpConfig>,
    },
    Poisson {
        #[serde(default)]
        brownian: usize,
        rate: f64,
        mark_law: MarkLaw,
    },
}

impl Default for DriverConfig {
    fn default() -> Self {
        DriverConfig::Deterministic {
            brownian: 0,
            jumps: Vec::new(),
        }
    }
}

impl DriverConfig {
    pub fn brownian(&self) -> usize {
        match self {
            DriverConfig::Deterministic { brownian, .. } | DriverConfig::Poisson { brownian, .. } => *brownian,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    #[serde(default = "one")]
    pub size: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self { size: 1 }
    }
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct LiftCheckConfig {
    /// Successively halved steps; defaults to the solver step alone.
    #[serde(default)]
    pub steps: Vec<f64>,
    /// Initial frame over `β₀(−d)`; defaults to the coordinate frame.
    pub frame: Option<Vec<Vec<f64>>>,
    /// Number of sampled drivers (seeds `seed`, `seed + 1`, …).
    #[serde(default = "one")]
    pub paths: usize,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransportConfig {
    /// The loop `t ↦ (θ, 2πt)` on `sphere2`, integrated with each step count.
    Latitude { theta: f64, steps: Vec<usize> },
    /// Polygon through chart points, parametrised uniformly over `[0, 1]`.
    Polyline { points: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    #[serde(default)]
    pub steps: Vec<f64>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    /// Include the frame columns in trajectory files.
    #[serde(default = "yes")]
    pub frames: bool,
    /// Write one file per ensemble member.
    #[serde(default = "yes")]
    pub trajectories: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: None,
            frames: true,
            trajectories: true,
        }
    }
}

fn yes() -> bool {
    true
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn vector(v: &[f64], n: usize, what: &str) -> Result<DVector<f64>, CliError> {
    if v.len() != n {
        return Err(config_err(format!("{what} has {} components, expected {n}", v.len())));
    }
    Ok(DVector::from_column_slice(v))
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, dir)
    }

    pub fn build_manifold(&self) -> Result<ManifoldSpec, CliError> {
        let m = &self.manifold;
        match (m.name.as_str(), m.dim) {
            ("euclidean", Some(n)) => Ok(euclidean(n)?),
            ("euclidean", None) => Err(config_err("euclidean needs `dim`")),
            (name, None) => Ok(builtin_manifold(name)?),
            (name, Some(_)) => Err(config_err(format!("`dim` is only accepted for euclidean, not {name}"))),
        }
    }

    pub fn build_fields(&self, n: usize) -> Result<Vec<VectorFieldSpec>, CliError> {
        if self.fields.is_empty() {
            return Err(config_err("at least one [[fields]] entry is required"));
        }
        self.fields
            .iter()
            .map(|f| {
                Ok(match f {
                    FieldConfig::Zero => VectorFieldSpec::zero(n),
                    FieldConfig::Constant { value } => VectorFieldSpec::constant(vector(value, n, "constant field")?),
                    FieldConfig::Affine { matrix, offset } => {
                        if matrix.len() != n || matrix.iter().any(|r| r.len() != n) {
                            return Err(config_err(format!("affine field matrix must be {n}×{n}")));
                        }
                        VectorFieldSpec::affine(
                            DMatrix::from_fn(n, n, |i, j| matrix[i][j]),
                            vector(offset, n, "affine field offset")?,
                        )
                    }
                    FieldConfig::Rotation if n == 2 => VectorFieldSpec::rotation2(),
                    FieldConfig::Rotation => return Err(config_err("rotation field needs dimension 2")),
                    FieldConfig::SphereXRotation { omega } if self.manifold.name == "sphere2" => {
                        VectorFieldSpec::sphere_x_rotation(*omega)
                    }
                    FieldConfig::SphereXRotation { .. } => {
                        return Err(config_err("sphere_x_rotation is only defined on sphere2"))
                    }
                })
            })
            .collect()
    }

    pub fn delay(&self) -> Result<f64, CliError> {
        self.equation
            .as_ref()
            .map(|e| e.delay)
            .ok_or_else(|| config_err("missing [equation] section"))
    }

    fn initial_curve(&self, n: usize, delay: f64) -> Result<PathSegment, CliError> {
        let init = self.initial.as_ref().ok_or_else(|| config_err("missing [initial] section"))?;
        Ok(match init {
            InitialConfig::Constant { point } => PathSegment::constant(vector(point, n, "initial point")?, -delay, 0.0, 1)?,
            InitialConfig::Linear { start, velocity } => {
                let a = vector(start, n, "initial start")?;
                let v = vector(velocity, n, "initial velocity")?;
                PathSegment::sample(-delay, 0.0, 1, |t| (&a + &v * (t + delay), v.clone()))?
            }
            InitialConfig::File { path } => {
                let full = self.base_dir.join(path);
                let text = std::fs::read_to_string(&full)
                    .map_err(|e| config_err(format!("cannot read {}: {e}", full.display())))?;
                let table = Trajectory::parse(&text)?;
                if table.columns.len() != n + 1 {
                    return Err(config_err(format!(
                        "initial curve file has {} columns, expected t and {n} coordinates",
                        table.columns.len()
                    )));
                }
                let times = table.rows.iter().map(|r| r[0]).collect();
                let points = table.rows.iter().map(|r| DVector::from_column_slice(&r[1..])).collect();
                PathSegment::polygonal(times, points)?
            }
        })
    }

    pub fn build_equation(&self) -> Result<EquationSpec, CliError> {
        let manifold = self.build_manifold()?;
        let n = manifold.dim();
        let fields = self.build_fields(n)?;
        let m = self.driver.brownian();
        if fields.len() != m + 1 {
            return Err(config_err(format!(
                "{} fields given for a driver with {m} Brownian components (need {})",
                fields.len(),
                m + 1
            )));
        }
        let delay = self.delay()?;
        let curve = self.initial_curve(n, delay)?;
        Ok(EquationSpec::new(manifold, fields, delay, curve)?)
    }

    pub fn solver_section(&self) -> Result<&SolverSection, CliError> {
        self.solver.as_ref().ok_or_else(|| config_err("missing [solver] section"))
    }

    /// Solver settings for step `step`; grid constraints are checked here.
    pub fn solver_config(&self, step: f64) -> Result<SolverConfig, CliError> {
        let s = self.solver_section()?;
        let scheme = s.scheme.unwrap_or(if self.driver.brownian() == 0 {
            Scheme::Rk4Deterministic
        } else {
            Scheme::HeunStratonovich
        });
        let mut cfg = SolverConfig::new(step, s.horizon, scheme);
        cfg.fictitious_steps = s.fictitious_steps;
        cfg.metric_projection = s.metric_projection;
        cfg.steps()?;
        cfg.delay_steps(self.delay()?)?;
        if scheme == Scheme::Rk4Deterministic && self.driver.brownian() > 0 {
            return Err(config_err("rk4_deterministic cannot be used with Brownian components"));
        }
        Ok(cfg)
    }

    fn schedule(&self, m: usize) -> Result<JumpSchedule, CliError> {
        let DriverConfig::Deterministic { jumps, .. } = &self.driver else {
            unreachable!("only inline schedules are converted");
        };
        let marks = jumps
            .iter()
            .map(|j| match &j.mark {
                Mark::Scalar(v) => vec![*v],
                Mark::Vector(v) => v.clone(),
            })
            .collect::<Vec<_>>();
        if marks.iter().any(|mk| mk.len() != m + 1) {
            return Err(config_err(format!("every jump mark needs m + 1 = {} components", m + 1)));
        }
        Ok(JumpSchedule::new(jumps.iter().map(|j| j.time).collect(), marks)?)
    }

    /// The driver path sampled with `seed` on the grid of step `step`.
    pub fn driver(&self, seed: u64, step: f64) -> Result<DriverPath, CliError> {
        let horizon = self.solver_section()?.horizon;
        Ok(match &self.driver {
            DriverConfig::Deterministic { brownian, .. } => {
                let schedule = self.schedule(*brownian)?;
                sample_brownian(seed, step, horizon, *brownian)?.with_schedule(&schedule, SnapPolicy::Reject)?
            }
            DriverConfig::Poisson {
                brownian,
                rate,
                mark_law,
            } => sample_driver(seed, step, horizon, *brownian, *rate, mark_law)?,
        })
    }

    /// Drivers on successively halved grids: sampled on the coarsest grid and
    /// refined by Brownian bridges, so that all levels share one path.
    pub fn refined_drivers(&self, seed: u64, steps: &[f64]) -> Result<Vec<DriverPath>, CliError> {
        check_halving(steps)?;
        let mut out = vec![self.driver(seed, steps[0])?];
        for k in 1..steps.len() {
            let next = out[k - 1].refine_bridge(seed.wrapping_add(k as u64));
            out.push(next);
        }
        Ok(out)
    }

    pub fn initial_frame(&self, n: usize) -> Result<DMatrix<f64>, CliError> {
        match &self.lift_check.frame {
            None => Ok(DMatrix::identity(n, n)),
            Some(rows) if rows.len() == n && rows.iter().all(|r| r.len() == n) => {
                Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
            }
            Some(_) => Err(config_err(format!("lift_check.frame must be {n}×{n}"))),
        }
    }
}

pub fn check_halving(steps: &[f64]) -> Result<(), CliError> {
    if steps.is_empty() {
        return Err(config_err("at least one step size is required"));
    }
    for w in steps.windows(2) {
        if (w[1] * 2.0 - w[0]).abs() > 1e-12 * w[0] {
            return Err(config_err(format!(
                "step sizes must halve successively, got {} then {}",
                w[0], w[1]
            )));
        }
    }
    Ok(())
}
