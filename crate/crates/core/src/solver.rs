//! Delay equations with jumps, solved by induction on the jumps.
//!
//! Between jumps the state follows
//!
//! ```text
//! dx = Σᵢ P_{t−d,t} Aⁱ(x(t−d)) ∘ dLⁱ
//! ```
//!
//! where `P_{t−d,t}` is parallel transport along the path over the last delay
//! window, fill curves included. At a jump time `t_n` the state moves to the
//! time-one value of `y' = Σₖ Jᵏ_n Aᵏ(y)` started at the left limit, and that
//! flow curve becomes the fill `β_n`.
//!
//! The window transport is never recomputed from scratch. The solver carries a
//! running frame `U(t)`, the transport from `β₀(−d)` to `γ(t)` along the whole
//! path so far, and uses `P_{t−d,t} = U(t) U(t−d)⁻¹`. Delayed field values are
//! stored pulled back to the start, `wⁱ = U⁻¹ Aⁱ(x)`, so the coefficient at
//! time `t` is just `U(t) wⁱ(t−d)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::drivers::{grid_steps, DriverPath};
use crate::error::{Error, Result};
use crate::manifold::{ChartPoint, ManifoldSpec, Tangent, VectorFieldSpec};
use crate::transport::{
    chord_transport, metric_project, segment_frames, Interpolation, JumpFill, PathSegment, PiecewisePath,
};

pub const DEFAULT_FICTITIOUS_STEPS: usize = 64;

/// The equation: manifold, fields `A⁰ … Aᵐ` (a single `F` in the
/// deterministic case), delay and initial curve on `[−d, 0]`.
#[derive(Clone, Debug)]
pub struct EquationSpec {
    pub manifold: ManifoldSpec,
    pub fields: Vec<VectorFieldSpec>,
    pub delay: f64,
    pub initial_curve: PathSegment,
}

impl EquationSpec {
    pub fn new(
        manifold: ManifoldSpec,
        fields: Vec<VectorFieldSpec>,
        delay: f64,
        initial_curve: PathSegment,
    ) -> Result<Self> {
        if !(delay > 0.0) || !delay.is_finite() {
            return Err(Error::Config(format!("delay {delay} must be positive")));
        }
        if fields.is_empty() {
            return Err(Error::Config("at least one vector field is required".into()));
        }
        if initial_curve.dim() != manifold.dim() {
            return Err(Error::Config(format!(
                "initial curve has dimension {}, manifold has {}",
                initial_curve.dim(),
                manifold.dim()
            )));
        }
        let tol = 1e-9 * delay.max(1.0);
        if (initial_curve.start_time() + delay).abs() > tol || initial_curve.end_time().abs() > tol {
            return Err(Error::Config(format!(
                "initial curve spans [{}, {}], expected [{}, 0]",
                initial_curve.start_time(),
                initial_curve.end_time(),
                -delay
            )));
        }
        if initial_curve.len() < 2 {
            return Err(Error::Config("initial curve needs at least two nodes".into()));
        }
        for (t, x) in initial_curve.times().iter().zip(initial_curve.points()) {
            manifold.check(x, *t, None)?;
        }
        let dim = manifold.dim();
        let probe = initial_curve.end();
        for f in &fields {
            if f.apply(probe).len() != dim {
                return Err(Error::Config(format!(
                    "field {:?} does not return {dim} components",
                    f.label()
                )));
            }
        }
        Ok(Self {
            manifold,
            fields,
            delay,
            initial_curve,
        })
    }

    /// Initial condition `β₀ ≡ point` on `[−d, 0]`.
    pub fn with_constant_history(
        manifold: ManifoldSpec,
        fields: Vec<VectorFieldSpec>,
        delay: f64,
        point: DVector<f64>,
    ) -> Result<Self> {
        let curve = PathSegment::constant(point, -delay, 0.0, 1)?;
        Self::new(manifold, fields, delay, curve)
    }

    /// Non-fatal remarks about the setup.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.delay > 1.0 {
            out.push(format!(
                "delay {} exceeds 1; the model assumes a delay in (0, 1]",
                self.delay
            ));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Stochastic trapezoidal (Heun) step, converging to the Stratonovich solution.
    HeunStratonovich,
    /// Classical RK4 for drivers without Brownian components.
    Rk4Deterministic,
}

#[derive(Clone, Debug)]
pub struct SolverConfig {
    pub step: f64,
    pub horizon: f64,
    pub scheme: Scheme,
    pub fictitious_steps: usize,
    pub singular_det: f64,
    /// Project the running frame back onto the metric isometries after every
    /// step. Off by default; only meaningful on manifolds with a metric.
    pub metric_projection: bool,
}

impl SolverConfig {
    pub fn new(step: f64, horizon: f64, scheme: Scheme) -> Self {
        Self {
            step,
            horizon,
            scheme,
            fictitious_steps: DEFAULT_FICTITIOUS_STEPS,
            singular_det: crate::transport::SINGULAR_DET,
            metric_projection: false,
        }
    }

    /// `d / h`, which must be a positive integer.
    pub fn delay_steps(&self, delay: f64) -> Result<usize> {
        let k = (delay / self.step).round();
        if k < 1.0 || (k * self.step - delay).abs() > 1e-9 * delay.max(1.0) {
            return Err(Error::Grid(format!(
                "step {} does not divide the delay {delay}",
                self.step
            )));
        }
        Ok(k as usize)
    }

    pub fn steps(&self) -> Result<usize> {
        grid_steps(self.step, self.horizon)
    }
}

/// State and frame at a grid node.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeState {
    pub x: DVector<f64>,
    pub frame: DMatrix<f64>,
}

/// Solution on `[−d, T]`: the càdlàg path with its fills, plus a frame per
/// grid node.
///
/// For the base solvers the frame is the running transport `U(t)` from
/// `T_{β₀(−d)}` to `T_{γ(t)}`. For the lifted solvers it is the frame part
/// of the bundle state `u(t)`.
#[derive(Clone, Debug)]
pub struct SolutionPath {
    path: PiecewisePath,
    step: f64,
    delay_steps: usize,
    times: Vec<f64>,
    nodes: Vec<NodeState>,
    left: Vec<Option<NodeState>>,
    fill_frames: Vec<Vec<DMatrix<f64>>>,
    driver: DriverPath,
}

impl SolutionPath {
    pub fn path(&self) -> &PiecewisePath {
        &self.path
    }

    pub fn driver(&self) -> &DriverPath {
        &self.driver
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn delay_steps(&self) -> usize {
        self.delay_steps
    }

    pub fn delay(&self) -> f64 {
        self.delay_steps as f64 * self.step
    }

    /// Grid times `−d, −d + h, …, T`.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Node states (right-continuous values).
    pub fn nodes(&self) -> &[NodeState] {
        &self.nodes
    }

    /// Left limit at node `idx` when a jump happens there.
    pub fn left(&self, idx: usize) -> Option<&NodeState> {
        self.left[idx].as_ref()
    }

    /// Frames along each fill curve, one per fill node.
    pub fn fill_frames(&self) -> &[Vec<DMatrix<f64>>] {
        &self.fill_frames
    }

    pub fn final_state(&self) -> &NodeState {
        self.nodes.last().unwrap()
    }

    /// Node index of grid time `t`.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let pos = (t + self.delay()) / self.step;
        let idx = pos.round();
        if idx < 0.0 || idx as usize >= self.nodes.len() || (pos - idx).abs() > 1e-6 {
            return Err(Error::Grid(format!("t = {t} is not a node of the solution grid")));
        }
        Ok(idx as usize)
    }

    /// `(t, state)` rows in time order, left limits before post-jump values.
    pub fn rows(&self) -> impl Iterator<Item = (f64, &NodeState)> + '_ {
        self.times.iter().enumerate().flat_map(move |(i, &t)| {
            self.left[i]
                .as_ref()
                .map(|l| (t, l))
                .into_iter()
                .chain(std::iter::once((t, &self.nodes[i])))
        })
    }

    /// `max |x − x'|` over the nodes of `self` (and left limits), where `other`
    /// is a solution on a grid that refines this one.
    pub fn sup_distance(&self, other: &SolutionPath) -> Result<f64> {
        let mut worst = 0.0_f64;
        for (i, &t) in self.times.iter().enumerate() {
            let j = other.index_of(t)?;
            worst = worst.max((&self.nodes[i].x - &other.nodes[j].x).amax());
            if let (Some(a), Some(b)) = (&self.left[i], &other.left[j]) {
                worst = worst.max((&a.x - &b.x).amax());
            }
        }
        Ok(worst)
    }

    pub fn frame_determinants(&self) -> Vec<f64> {
        self.nodes.iter().map(|s| s.frame.determinant()).collect()
    }
}

/// Unit-time flow of `y' = Σₖ Jᵏ Aᵏ(y)` by RK4. Returns node points and
/// velocities, and the frames carried along when `frame` is given (the
/// horizontal lift of the same flow).
fn marcus_flow(
    m: &ManifoldSpec,
    fields: &[VectorFieldSpec],
    mark: &DVector<f64>,
    z: &DVector<f64>,
    steps: usize,
    jump_index: usize,
    frame: Option<&DMatrix<f64>>,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>, Vec<DMatrix<f64>>)> {
    if mark.len() != fields.len() {
        return Err(Error::Config(format!(
            "jump mark has {} components for {} fields",
            mark.len(),
            fields.len()
        )));
    }
    let field = |y: &DVector<f64>| -> DVector<f64> {
        let mut acc = DVector::zeros(y.len());
        for (f, &j) in fields.iter().zip(mark.iter()) {
            if j != 0.0 {
                acc += f.apply(y) * j;
            }
        }
        acc
    };
    let ds = 1.0 / steps as f64;
    let lifted = frame.is_some() && !m.is_flat();
    let gen = |y: &DVector<f64>, v: &DVector<f64>| -m.christoffel(y).contract(v);
    let check = |y: &DVector<f64>, s: f64| m.check(y, s, Some(jump_index));

    let mut y = z.clone();
    check(&y, 0.0)?;
    let mut e = frame.cloned();
    let mut points = vec![y.clone()];
    let mut velocities = vec![field(&y)];
    let mut frames: Vec<DMatrix<f64>> = e.iter().cloned().collect();
    for step in 0..steps {
        let s = step as f64 * ds;
        let k1 = field(&y);
        let y2 = &y + &k1 * (0.5 * ds);
        check(&y2, s + 0.5 * ds)?;
        let k2 = field(&y2);
        let y3 = &y + &k2 * (0.5 * ds);
        check(&y3, s + 0.5 * ds)?;
        let k3 = field(&y3);
        let y4 = &y + &k3 * ds;
        check(&y4, s + ds)?;
        let k4 = field(&y4);
        let y_next = &y + (&k1 + &k2 * 2.0 + &k3 * 2.0 + &k4) * (ds / 6.0);
        check(&y_next, s + ds)?;
        if let Some(e0) = e.as_mut() {
            if lifted {
                let f1 = gen(&y, &k1) * &*e0;
                let e2 = &*e0 + &f1 * (0.5 * ds);
                let f2 = gen(&y2, &k2) * &e2;
                let e3 = &*e0 + &f2 * (0.5 * ds);
                let f3 = gen(&y3, &k3) * &e3;
                let e4 = &*e0 + &f3 * ds;
                let f4 = gen(&y4, &k4) * &e4;
                *e0 += (f1 + f2 * 2.0 + f3 * 2.0 + f4) * (ds / 6.0);
            }
            frames.push(e0.clone());
        }
        y = y_next;
        velocities.push(field(&y));
        points.push(y.clone());
    }
    Ok((points, velocities, frames))
}

/// The fill curve of a jump with mark `J` from the left limit `z`: the RK4
/// solution of `y' = Σₖ Jᵏ Aᵏ(y)` on fictitious time `[0, 1]`. Its end point
/// is the post-jump state.
pub fn marcus_jump(
    m: &ManifoldSpec,
    fields: &[VectorFieldSpec],
    mark: &DVector<f64>,
    z: &ChartPoint,
    steps: usize,
    jump_index: usize,
) -> Result<JumpFill> {
    if steps == 0 {
        return Err(Error::Config("fill curves need at least one step".into()));
    }
    let (points, velocities, _) = marcus_flow(m, fields, mark, &z.coords, steps, jump_index, None)?;
    let times = (0..=steps).map(|i| if i == steps { 1.0 } else { i as f64 / steps as f64 }).collect();
    JumpFill::new(jump_index, PathSegment::new(times, points, velocities)?)
}

/// How the frame is advanced alongside the state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum FrameRule {
    /// Parallel transport along the chord of each step (base solvers).
    Chord,
    /// Integrated jointly with the state as the horizontal lift (bundle solvers).
    Horizontal,
}

struct Engine<'a> {
    m: &'a ManifoldSpec,
    fields: &'a [VectorFieldSpec],
    rule: FrameRule,
    singular_det: f64,
    identity_frames: bool,
}

impl Engine<'_> {
    /// `wⁱ = E⁻¹ Aⁱ(x)` for every field.
    fn pull_back(&self, x: &DVector<f64>, frame: &DMatrix<f64>, time: f64) -> Result<Vec<DVector<f64>>> {
        if self.identity_frames {
            return Ok(self.fields.iter().map(|f| f.apply(x)).collect());
        }
        let lu = frame.clone().lu();
        let det = lu.determinant();
        if !(det.abs() >= self.singular_det) {
            return Err(Error::Singular { time, det });
        }
        Ok(self.fields.iter().map(|f| lu.solve(&f.apply(x)).expect("nonsingular")).collect())
    }

    fn generator(&self, x: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
        -self.m.christoffel(x).contract(v)
    }

    fn chord(&self, a: &DVector<f64>, b: &DVector<f64>, e: &DMatrix<f64>, time: f64) -> Result<DMatrix<f64>> {
        if self.m.is_flat() {
            return Ok(e.clone());
        }
        Ok(chord_transport(self.m, a, b, time)? * e)
    }

    fn check(&self, x: &DVector<f64>, time: f64) -> Result<()> {
        self.m.check(x, time, None)
    }

    /// One Heun step with pulled-back increments `ω_s` (delayed node at the
    /// start of the step) and `ω_e` (delayed left limit at its end).
    fn heun(
        &self,
        x: &DVector<f64>,
        e: &DMatrix<f64>,
        omega_s: &DVector<f64>,
        omega_e: &DVector<f64>,
        t: f64,
        h: f64,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let d1 = e * omega_s;
        let x_pred = x + &d1;
        self.check(&x_pred, t + h)?;
        match self.rule {
            FrameRule::Chord => {
                let e_pred = self.chord(x, &x_pred, e, t + h)?;
                let d2 = &e_pred * omega_e;
                let x_next = x + (&d1 + &d2) * 0.5;
                self.check(&x_next, t + h)?;
                let e_next = self.chord(x, &x_next, e, t + h)?;
                Ok((x_next, e_next))
            }
            FrameRule::Horizontal => {
                let g1 = self.generator(x, &d1) * e;
                let e_pred = e + &g1;
                let d2 = &e_pred * omega_e;
                let g2 = self.generator(&x_pred, &d2) * &e_pred;
                let x_next = x + (&d1 + &d2) * 0.5;
                self.check(&x_next, t + h)?;
                let e_next = e + (g1 + g2) * 0.5;
                Ok((x_next, e_next))
            }
        }
    }

    /// One RK4 step of `x' = E r(t)` with `r` linear between the delayed
    /// rates `r_s` and `r_e`.
    fn rk4(
        &self,
        x: &DVector<f64>,
        e: &DMatrix<f64>,
        r_s: &DVector<f64>,
        r_e: &DVector<f64>,
        t: f64,
        h: f64,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let r_m = (r_s + r_e) * 0.5;
        let tm = t + 0.5 * h;
        match self.rule {
            FrameRule::Chord => {
                let k1 = e * r_s;
                let x2 = x + &k1 * (0.5 * h);
                self.check(&x2, tm)?;
                let k2 = self.chord(x, &x2, e, tm)? * &r_m;
                let x3 = x + &k2 * (0.5 * h);
                self.check(&x3, tm)?;
                let k3 = self.chord(x, &x3, e, tm)? * &r_m;
                let x4 = x + &k3 * h;
                self.check(&x4, t + h)?;
                let k4 = self.chord(x, &x4, e, t + h)? * r_e;
                let x_next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
                self.check(&x_next, t + h)?;
                let e_next = self.chord(x, &x_next, e, t + h)?;
                Ok((x_next, e_next))
            }
            FrameRule::Horizontal => {
                let k1 = e * r_s;
                let f1 = self.generator(x, &k1) * e;
                let x2 = x + &k1 * (0.5 * h);
                self.check(&x2, tm)?;
                let e2 = e + &f1 * (0.5 * h);
                let k2 = &e2 * &r_m;
                let f2 = self.generator(&x2, &k2) * &e2;
                let x3 = x + &k2 * (0.5 * h);
                self.check(&x3, tm)?;
                let e3 = e + &f2 * (0.5 * h);
                let k3 = &e3 * &r_m;
                let f3 = self.generator(&x3, &k3) * &e3;
                let x4 = x + &k3 * h;
                self.check(&x4, t + h)?;
                let e4 = e + &f3 * h;
                let k4 = &e4 * r_e;
                let f4 = self.generator(&x4, &k4) * &e4;
                let x_next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
                self.check(&x_next, t + h)?;
                let e_next = e + (f1 + f2 * 2.0 + f3 * 2.0 + f4) * (h / 6.0);
                Ok((x_next, e_next))
            }
        }
    }
}

fn combine(ws: &[DVector<f64>], driver: &DriverPath, k: usize) -> DVector<f64> {
    let mut acc = ws[0].clone() * driver.increment(k, 0);
    for (i, w) in ws.iter().enumerate().skip(1) {
        acc += w * driver.increment(k, i);
    }
    acc
}

/// The stepping engine shared by the base and the lifted solvers.
pub(crate) fn integrate(
    eq: &EquationSpec,
    driver: &DriverPath,
    cfg: &SolverConfig,
    rule: FrameRule,
    start_frame: DMatrix<f64>,
) -> Result<SolutionPath> {
    let m = &eq.manifold;
    let n = m.dim();
    let h = cfg.step;
    let steps = cfg.steps()?;
    if driver.steps() != steps || (driver.step() - h).abs() > 1e-12 * h {
        return Err(Error::Grid(format!(
            "driver grid ({} steps of {}) does not match the solver grid ({steps} steps of {h})",
            driver.steps(),
            driver.step()
        )));
    }
    let md = cfg.delay_steps(eq.delay)?;
    if eq.fields.len() != driver.m() + 1 {
        return Err(Error::Config(format!(
            "{} fields for a driver with {} Brownian components (need m + 1)",
            eq.fields.len(),
            driver.m()
        )));
    }
    if cfg.scheme == Scheme::Rk4Deterministic && driver.m() > 0 {
        return Err(Error::Config("rk4_deterministic needs a driver without Brownian components".into()));
    }
    if rule == FrameRule::Horizontal && !m.connection().symmetric {
        return Err(Error::Config("frame-bundle lifts need a torsion-free connection".into()));
    }
    if cfg.fictitious_steps == 0 {
        return Err(Error::Config("fictitious_steps must be positive".into()));
    }
    if start_frame.shape() != (n, n) {
        return Err(Error::Contract(format!("initial frame must be {n}×{n}")));
    }

    let engine = Engine {
        m,
        fields: &eq.fields,
        rule,
        singular_det: cfg.singular_det,
        identity_frames: m.is_flat() && rule == FrameRule::Chord,
    };
    let total = md + steps + 1;
    let times: Vec<f64> = (0..total).map(|idx| (idx as i64 - md as i64) as f64 * h).collect();

    // history on [−d, 0], resampled onto the grid
    let (hist_points, hist_velocities): (Vec<_>, Vec<_>) =
        times[..=md].iter().map(|&t| eq.initial_curve.eval(t)).unzip();
    let initial = match eq.initial_curve.interpolation() {
        Interpolation::Hermite => PathSegment::new(times[..=md].to_vec(), hist_points, hist_velocities)?,
        Interpolation::Linear => PathSegment::polygonal(times[..=md].to_vec(), hist_points)?,
    };
    let hist_frames = if engine.identity_frames {
        vec![DMatrix::identity(n, n); md + 1]
    } else {
        segment_frames(m, &initial, &start_frame, None)?
    };

    let mut nodes: Vec<NodeState> = Vec::with_capacity(total);
    let mut left: Vec<Option<NodeState>> = vec![None; total];
    let mut pulled: Vec<Vec<DVector<f64>>> = Vec::with_capacity(total);
    let mut pulled_left: Vec<Option<Vec<DVector<f64>>>> = vec![None; total];
    for (idx, (x, e)) in initial.points().iter().zip(hist_frames).enumerate() {
        pulled.push(engine.pull_back(x, &e, times[idx])?);
        nodes.push(NodeState { x: x.clone(), frame: e });
    }

    let mut segments = vec![initial];
    let mut fills = Vec::new();
    let mut fill_frames = Vec::new();
    let mut seg_times = vec![0.0];
    let mut seg_points = vec![nodes[md].x.clone()];
    let origin = nodes[0].x.clone();

    for k in 0..steps {
        let idx = k + md;
        let t = times[idx];
        // the delayed node of step k is array index k
        let w_start = &pulled[k];
        let w_end = pulled_left[k + 1].as_ref().unwrap_or(&pulled[k + 1]);
        let (x, e) = (&nodes[idx].x, &nodes[idx].frame);
        let (x_next, mut e_next) = match cfg.scheme {
            Scheme::HeunStratonovich => {
                let omega_s = combine(w_start, driver, k);
                let omega_e = combine(w_end, driver, k);
                engine.heun(x, e, &omega_s, &omega_e, t, h)?
            }
            Scheme::Rk4Deterministic => engine.rk4(x, e, &w_start[0], &w_end[0], t, h)?,
        };
        let t_next = times[idx + 1];
        if cfg.metric_projection && rule == FrameRule::Chord && !m.is_flat() {
            e_next = metric_project(m, &e_next, &origin, &x_next);
        }
        if e_next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { time: t_next });
        }

        seg_times.push(t_next);
        seg_points.push(x_next.clone());

        let mut state = NodeState { x: x_next, frame: e_next };
        if let Some(jump) = driver.jump_at_node(k + 1) {
            let jump_index = jump + 1;
            let mark = driver.schedule().mark(jump);
            let lifted_frame = (rule == FrameRule::Horizontal).then_some(&state.frame);
            let (points, velocities, frames) = marcus_flow(
                m,
                &eq.fields,
                &mark,
                &state.x,
                cfg.fictitious_steps,
                jump_index,
                lifted_frame,
            )
            .map_err(|err| match err {
                Error::DomainExit { jump, coords, .. } => Error::DomainExit {
                    time: t_next,
                    jump,
                    coords,
                },
                Error::NonFinite { .. } => Error::NonFinite { time: t_next },
                other => other,
            })?;
            let fs = cfg.fictitious_steps;
            let fill_times = (0..=fs).map(|i| if i == fs { 1.0 } else { i as f64 / fs as f64 }).collect();
            let fill = JumpFill::new(jump_index, PathSegment::new(fill_times, points, velocities)?)?;
            let frames = match rule {
                FrameRule::Horizontal => frames,
                FrameRule::Chord if engine.identity_frames => vec![state.frame.clone(); fs + 1],
                FrameRule::Chord => segment_frames(m, &fill.curve, &state.frame, Some(jump_index))
                    .map_err(|err| match err {
                        Error::DomainExit { jump, coords, .. } => Error::DomainExit {
                            time: t_next,
                            jump,
                            coords,
                        },
                        other => other,
                    })?,
            };
            let post = NodeState {
                x: fill.curve.end().clone(),
                frame: frames.last().unwrap().clone(),
            };
            pulled_left[idx + 1] = Some(engine.pull_back(&state.x, &state.frame, t_next)?);
            segments.push(PathSegment::polygonal(std::mem::take(&mut seg_times), std::mem::take(&mut seg_points))?);
            seg_times.push(t_next);
            seg_points.push(post.x.clone());
            left[idx + 1] = Some(std::mem::replace(&mut state, post));
            fills.push(fill);
            fill_frames.push(frames);
        }
        pulled.push(engine.pull_back(&state.x, &state.frame, t_next)?);
        nodes.push(state);
    }
    segments.push(PathSegment::polygonal(seg_times, seg_points)?);

    let path = PiecewisePath::new(segments, fills, driver.schedule().times().to_vec())?;
    Ok(SolutionPath {
        path,
        step: h,
        delay_steps: md,
        times,
        nodes,
        left,
        fill_frames,
        driver: driver.clone(),
    })
}

fn identity(eq: &EquationSpec) -> DMatrix<f64> {
    let n = eq.manifold.dim();
    DMatrix::identity(n, n)
}

/// Deterministic delay equation driven by `S_t` (a driver with `m = 0`).
pub fn solve_ddej(eq: &EquationSpec, driver: &DriverPath, cfg: &SolverConfig) -> Result<SolutionPath> {
    if driver.m() != 0 {
        return Err(Error::Config("the deterministic solver takes a driver with m = 0".into()));
    }
    integrate(eq, driver, cfg, FrameRule::Chord, identity(eq))
}

/// Stochastic delay equation driven by `L_t`, Stratonovich between jumps.
pub fn solve_sddej(eq: &EquationSpec, driver: &DriverPath, cfg: &SolverConfig) -> Result<SolutionPath> {
    integrate(eq, driver, cfg, FrameRule::Chord, identity(eq))
}

/// `P_{t−d,t} Aⁱ(γ(t−d))` read off a solution at grid time `t`: the field at
/// the delayed (right-continuous) point, carried to `γ(t)` by
/// `U(t) U(t−d)⁻¹`.
pub fn delayed_vector(eq: &EquationSpec, sol: &SolutionPath, t: f64, component: usize) -> Result<Tangent> {
    let field = eq
        .fields
        .get(component)
        .ok_or_else(|| Error::Contract(format!("no field with index {component}")))?;
    let idx = sol.index_of(t)?;
    let md = sol.delay_steps();
    if idx < md {
        return Err(Error::Range {
            t,
            start: 0.0,
            end: sol.times().last().copied().unwrap_or(0.0),
        });
    }
    let delayed = &sol.nodes()[idx - md];
    let now = &sol.nodes()[idx];
    let v = field.apply(&delayed.x);
    let lu = delayed.frame.clone().lu();
    let det = lu.determinant();
    if !(det.abs() >= crate::transport::SINGULAR_DET) {
        return Err(Error::Singular { time: t - sol.delay(), det });
    }
    let pulled = lu.solve(&v).expect("nonsingular");
    Ok(Tangent::new(ChartPoint::new(now.x.clone()), &now.frame * pulled))
}
