//! Parallel transport along sampled curves and along càdlàg paths.
//!
//! A [`PathSegment`] is a sampled differentiable curve. Transport solves the
//! linear ODE `E' = −Γ(γ)[γ'] E`, `E(start) = I`, with classical RK4 on the
//! segment's own grid. Between nodes the curve is either the cubic Hermite
//! interpolant of the node points and velocities, or the straight chord
//! (polygonal paths, used for stochastic trajectories where node velocities do
//! not exist).
//!
//! A [`PiecewisePath`] is a càdlàg curve: differentiable segments separated by
//! jumps, with each jump bridged by a [`JumpFill`] on fictitious time `[0, 1]`.
//! [`concat_transport`] transports across the window `[s, t]` by running along
//! the segments and inserting the fill of every jump in `(s, t]`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::manifold::{ChartPoint, ManifoldSpec, Tangent};

/// Transport matrices with `|det|` below this are treated as singular.
pub const SINGULAR_DET: f64 = 1e-12;

const BASE_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolation {
    /// Cubic Hermite interpolation of points and node velocities.
    Hermite,
    /// Straight chord between nodes; the velocity is the chord slope.
    Linear,
}

#[derive(Clone, Debug)]
pub struct PathSegment {
    times: Vec<f64>,
    points: Vec<DVector<f64>>,
    velocities: Vec<DVector<f64>>,
    interpolation: Interpolation,
}

impl PathSegment {
    /// A differentiable curve sampled with its velocities.
    pub fn new(times: Vec<f64>, points: Vec<DVector<f64>>, velocities: Vec<DVector<f64>>) -> Result<Self> {
        Self::validate(&times, &points, &velocities)?;
        Ok(Self {
            times,
            points,
            velocities,
            interpolation: Interpolation::Hermite,
        })
    }

    /// A polygonal curve through `points`. Node velocities are recorded as the
    /// forward chord slope (backward on the last node).
    pub fn polygonal(times: Vec<f64>, points: Vec<DVector<f64>>) -> Result<Self> {
        let velocities = chord_velocities(&times, &points);
        Self::validate(&times, &points, &velocities)?;
        Ok(Self {
            times,
            points,
            velocities,
            interpolation: Interpolation::Linear,
        })
    }

    /// The constant curve at `point` over `[t0, t1]` with `steps` intervals.
    pub fn constant(point: DVector<f64>, t0: f64, t1: f64, steps: usize) -> Result<Self> {
        let n = point.len();
        Self::sample(t0, t1, steps, |_| (point.clone(), DVector::zeros(n)))
    }

    /// Samples `curve(t) = (γ(t), γ'(t))` on a uniform grid.
    pub fn sample(
        t0: f64,
        t1: f64,
        steps: usize,
        curve: impl Fn(f64) -> (DVector<f64>, DVector<f64>),
    ) -> Result<Self> {
        if steps == 0 || !(t1 > t0) {
            return Err(Error::Contract(format!(
                "cannot sample [{t0}, {t1}] with {steps} steps"
            )));
        }
        let dt = (t1 - t0) / steps as f64;
        let times: Vec<f64> = (0..=steps)
            .map(|i| if i == steps { t1 } else { t0 + i as f64 * dt })
            .collect();
        let (points, velocities) = times.iter().map(|&t| curve(t)).unzip();
        Self::new(times, points, velocities)
    }

    fn validate(times: &[f64], points: &[DVector<f64>], velocities: &[DVector<f64>]) -> Result<()> {
        if times.is_empty() {
            return Err(Error::Contract("path segment needs at least one node".into()));
        }
        if points.len() != times.len() || velocities.len() != times.len() {
            return Err(Error::Contract(format!(
                "segment has {} times, {} points, {} velocities",
                times.len(),
                points.len(),
                velocities.len()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Contract("segment times must be strictly increasing".into()));
        }
        let n = points[0].len();
        if points.iter().chain(velocities).any(|v| v.len() != n) {
            return Err(Error::Contract("segment points and velocities must share one dimension".into()));
        }
        Ok(())
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    pub fn velocities(&self) -> &[DVector<f64>] {
        &self.velocities
    }

    pub fn interpolation(&self) -> Interpolation {
        self.interpolation
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn start_time(&self) -> f64 {
        self.times[0]
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn start(&self) -> &DVector<f64> {
        &self.points[0]
    }

    pub fn end(&self) -> &DVector<f64> {
        self.points.last().unwrap()
    }

    pub fn point(&self, i: usize) -> ChartPoint {
        ChartPoint::new(self.points[i].clone())
    }

    pub fn velocity(&self, i: usize) -> Tangent {
        Tangent::new(self.point(i), self.velocities[i].clone())
    }

    /// Index `i` of the interval `[times[i], times[i+1]]` containing `t`.
    fn interval(&self, t: f64) -> usize {
        let k = self.times.partition_point(|&s| s <= t);
        k.saturating_sub(1).min(self.times.len().saturating_sub(2))
    }

    /// Position and velocity of the interpolated curve at `t`.
    pub fn eval(&self, t: f64) -> (DVector<f64>, DVector<f64>) {
        if self.len() == 1 {
            return (self.points[0].clone(), self.velocities[0].clone());
        }
        let i = self.interval(t);
        self.eval_in(i, t)
    }

    fn eval_in(&self, i: usize, t: f64) -> (DVector<f64>, DVector<f64>) {
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let dt = t1 - t0;
        let s = (t - t0) / dt;
        let (p0, p1) = (&self.points[i], &self.points[i + 1]);
        if s == 0.0 || s == 1.0 {
            let j = if s == 0.0 { i } else { i + 1 };
            let v = match self.interpolation {
                Interpolation::Hermite => self.velocities[j].clone(),
                Interpolation::Linear => (p1 - p0) / dt,
            };
            return (self.points[j].clone(), v);
        }
        match self.interpolation {
            Interpolation::Linear => {
                let chord = (p1 - p0) / dt;
                (p0 + (p1 - p0) * s, chord)
            }
            Interpolation::Hermite => {
                let (v0, v1) = (&self.velocities[i], &self.velocities[i + 1]);
                let s2 = s * s;
                let s3 = s2 * s;
                let h10 = s3 - 2.0 * s2 + s;
                let h01 = -2.0 * s3 + 3.0 * s2;
                let h11 = s3 - s2;
                // written around p0 so that a stationary curve evaluates exactly
                let chord = p1 - p0;
                let p = p0 + &chord * h01 + v0 * (h10 * dt) + v1 * (h11 * dt);
                let d10 = 3.0 * s2 - 4.0 * s + 1.0;
                let d01 = -6.0 * s2 + 6.0 * s;
                let d11 = 3.0 * s2 - 2.0 * s;
                let v = chord * (d01 / dt) + v0 * d10 + v1 * d11;
                (p, v)
            }
        }
    }

    /// The part of the segment over `[a, b]`, with interpolated end nodes.
    /// `None` when the window is empty.
    pub fn restrict(&self, a: f64, b: f64) -> Option<PathSegment> {
        let a = a.max(self.start_time());
        let b = b.min(self.end_time());
        if !(b > a) {
            return None;
        }
        let mut times = Vec::new();
        let mut points = Vec::new();
        let mut velocities = Vec::new();
        let lo = self.interval(a);
        let (pa, va) = self.eval_in(lo, a);
        times.push(a);
        points.push(pa);
        velocities.push(va);
        for i in 0..self.len() {
            let t = self.times[i];
            if t > a && t < b {
                times.push(t);
                points.push(self.points[i].clone());
                velocities.push(self.velocities[i].clone());
            }
        }
        let hi = self.interval(b);
        let hi = if self.times[hi] == b && hi > 0 { hi - 1 } else { hi };
        let (pb, vb) = self.eval_in(hi, b);
        times.push(b);
        points.push(pb);
        velocities.push(vb);
        let velocities = match self.interpolation {
            Interpolation::Hermite => velocities,
            Interpolation::Linear => chord_velocities(&times, &points),
        };
        Some(PathSegment {
            times,
            points,
            velocities,
            interpolation: self.interpolation,
        })
    }

    /// The same curve traversed backwards, on the time grid `t ↦ start + end − t`.
    pub fn reversed(&self) -> PathSegment {
        let (t0, t1) = (self.start_time(), self.end_time());
        let times: Vec<f64> = self.times.iter().rev().map(|&t| t0 + t1 - t).collect();
        let points: Vec<_> = self.points.iter().rev().cloned().collect();
        let velocities = match self.interpolation {
            Interpolation::Hermite => self.velocities.iter().rev().map(|v| -v).collect(),
            Interpolation::Linear => chord_velocities(&times, &points),
        };
        PathSegment {
            times,
            points,
            velocities,
            interpolation: self.interpolation,
        }
    }
}

fn chord_velocities(times: &[f64], points: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let k = times.len();
    if k < 2 {
        return points.iter().map(|p| DVector::zeros(p.len())).collect();
    }
    (0..k)
        .map(|i| {
            let j = i.min(k - 2);
            (&points[j + 1] - &points[j]) / (times[j + 1] - times[j])
        })
        .collect()
}

/// Coordinate representation of a linear map `T_from M → T_to M`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportMatrix {
    pub from_point: ChartPoint,
    pub to_point: ChartPoint,
    pub matrix: DMatrix<f64>,
}

impl TransportMatrix {
    pub fn identity_at(x: &DVector<f64>) -> Self {
        let n = x.len();
        Self {
            from_point: ChartPoint::new(x.clone()),
            to_point: ChartPoint::new(x.clone()),
            matrix: DMatrix::identity(n, n),
        }
    }

    pub fn determinant(&self) -> f64 {
        self.matrix.determinant()
    }

    /// The map back from `to_point` to `from_point`.
    pub fn inverse(&self) -> Result<TransportMatrix> {
        let det = self.determinant();
        let inv = self
            .matrix
            .clone()
            .try_inverse()
            .filter(|_| det.abs() >= SINGULAR_DET)
            .ok_or(Error::Singular { time: f64::NAN, det })?;
        Ok(TransportMatrix {
            from_point: self.to_point.clone(),
            to_point: self.from_point.clone(),
            matrix: inv,
        })
    }

    /// `later ∘ self`.
    pub fn then(&self, later: &TransportMatrix) -> TransportMatrix {
        TransportMatrix {
            from_point: self.from_point.clone(),
            to_point: later.to_point.clone(),
            matrix: &later.matrix * &self.matrix,
        }
    }
}

fn same_point(a: &DVector<f64>, b: &DVector<f64>) -> bool {
    a.len() == b.len() && a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= BASE_TOL * (1.0 + x.abs()))
}

/// `−Σ_b Γ^a_{bc}(x) v^b`, the generator of the transport ODE.
#[inline]
pub(crate) fn transport_generator(m: &ManifoldSpec, x: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
    -m.christoffel(x).contract(v)
}

/// One RK4 step of `E' = −Γ(γ)[γ'] E` given the curve at the left node, the
/// midpoint and the right node.
pub(crate) fn rk4_transport_step(
    m: &ManifoldSpec,
    e: &DMatrix<f64>,
    left: (&DVector<f64>, &DVector<f64>),
    mid: (&DVector<f64>, &DVector<f64>),
    right: (&DVector<f64>, &DVector<f64>),
    dt: f64,
) -> DMatrix<f64> {
    let a0 = transport_generator(m, left.0, left.1);
    let am = transport_generator(m, mid.0, mid.1);
    let a1 = transport_generator(m, right.0, right.1);
    let k1 = &a0 * e;
    let k2 = &am * (e + &k1 * (0.5 * dt));
    let k3 = &am * (e + &k2 * (0.5 * dt));
    let k4 = &a1 * (e + &k3 * dt);
    e + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// Transport along the straight chart chord from `a` to `b`, one RK4 step.
/// `time` is only used to tag errors.
pub fn chord_transport(m: &ManifoldSpec, a: &DVector<f64>, b: &DVector<f64>, time: f64) -> Result<DMatrix<f64>> {
    let n = a.len();
    if m.is_flat() {
        return Ok(DMatrix::identity(n, n));
    }
    let mid = (a + b) * 0.5;
    m.check(&mid, time, None)?;
    m.check(b, time, None)?;
    let v = b - a;
    Ok(rk4_transport_step(m, &DMatrix::identity(n, n), (a, &v), (&mid, &v), (b, &v), 1.0))
}

/// Running transport over a segment: the matrix from the segment start to
/// each node, in order. `jump` tags domain errors raised inside a fill.
pub(crate) fn segment_frames(
    m: &ManifoldSpec,
    seg: &PathSegment,
    start: &DMatrix<f64>,
    jump: Option<usize>,
) -> Result<Vec<DMatrix<f64>>> {
    let mut frames = Vec::with_capacity(seg.len());
    frames.push(start.clone());
    for (t, p) in seg.times.iter().zip(&seg.points) {
        m.check(p, *t, jump)?;
    }
    if m.is_flat() {
        frames.resize(seg.len(), start.clone());
        return Ok(frames);
    }
    let mut e = start.clone();
    for i in 0..seg.len() - 1 {
        let (t0, t1) = (seg.times[i], seg.times[i + 1]);
        let dt = t1 - t0;
        let tm = t0 + 0.5 * dt;
        let (pm, vm) = seg.eval_in(i, tm);
        m.check(&pm, tm, jump)?;
        e = match seg.interpolation {
            Interpolation::Hermite => rk4_transport_step(
                m,
                &e,
                (&seg.points[i], &seg.velocities[i]),
                (&pm, &vm),
                (&seg.points[i + 1], &seg.velocities[i + 1]),
                dt,
            ),
            Interpolation::Linear => rk4_transport_step(
                m,
                &e,
                (&seg.points[i], &vm),
                (&pm, &vm),
                (&seg.points[i + 1], &vm),
                dt,
            ),
        };
        if e.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { time: t1 });
        }
        frames.push(e.clone());
    }
    Ok(frames)
}

fn checked(m: TransportMatrix, time: f64) -> Result<TransportMatrix> {
    let det = m.determinant();
    if !(det.abs() >= SINGULAR_DET) {
        return Err(Error::Singular { time, det });
    }
    Ok(m)
}

/// Parallel transport from the start of `seg` to its end.
pub fn transport_segment(m: &ManifoldSpec, seg: &PathSegment) -> Result<TransportMatrix> {
    let n = seg.dim();
    if n != m.dim() {
        return Err(Error::Contract(format!(
            "segment dimension {n} does not match manifold dimension {}",
            m.dim()
        )));
    }
    let frames = segment_frames(m, seg, &DMatrix::identity(n, n), None)?;
    checked(
        TransportMatrix {
            from_point: seg.point(0),
            to_point: seg.point(seg.len() - 1),
            matrix: frames.into_iter().last().unwrap(),
        },
        seg.end_time(),
    )
}

pub fn transport_vector(p: &TransportMatrix, v: &Tangent) -> Result<Tangent> {
    if !same_point(&v.base.coords, &p.from_point.coords) {
        return Err(Error::Contract(format!(
            "vector based at {:?}, transport starts at {:?}",
            v.base.coords.as_slice(),
            p.from_point.coords.as_slice()
        )));
    }
    Ok(Tangent::new(p.to_point.clone(), &p.matrix * &v.components))
}

/// Jump-filling curve `β_n` over fictitious time `[0, 1]`.
#[derive(Clone, Debug)]
pub struct JumpFill {
    /// 1-based index of the jump this curve bridges.
    pub jump_index: usize,
    pub curve: PathSegment,
}

impl JumpFill {
    pub fn new(jump_index: usize, curve: PathSegment) -> Result<Self> {
        if jump_index == 0 {
            return Err(Error::Contract("jump indices start at 1".into()));
        }
        if curve.start_time() != 0.0 || curve.end_time() != 1.0 {
            return Err(Error::Contract(format!(
                "fill curve must span [0, 1], got [{}, {}]",
                curve.start_time(),
                curve.end_time()
            )));
        }
        Ok(Self { jump_index, curve })
    }
}

/// A càdlàg curve: differentiable segments, with a fill across every jump.
///
/// Consecutive segments share their boundary time. At a jump time the left
/// segment ends at the left limit and the right one starts at the post-jump
/// value; any other boundary must be continuous.
#[derive(Clone, Debug)]
pub struct PiecewisePath {
    segments: Vec<PathSegment>,
    fills: Vec<JumpFill>,
    jump_times: Vec<f64>,
    /// For each boundary between segment `i` and `i + 1`, the fill index.
    boundary_fill: Vec<Option<usize>>,
}

impl PiecewisePath {
    pub fn new(segments: Vec<PathSegment>, fills: Vec<JumpFill>, jump_times: Vec<f64>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::Contract("path needs at least one segment".into()));
        }
        if fills.len() != jump_times.len() {
            return Err(Error::Contract(format!(
                "{} fills for {} jump times",
                fills.len(),
                jump_times.len()
            )));
        }
        if jump_times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Contract("jump times must be strictly increasing".into()));
        }
        let mut boundary_fill = Vec::with_capacity(segments.len() - 1);
        let mut next_jump = 0;
        for i in 0..segments.len() - 1 {
            let (left, right) = (&segments[i], &segments[i + 1]);
            let tau = left.end_time();
            if (right.start_time() - tau).abs() > BASE_TOL * (1.0 + tau.abs()) {
                return Err(Error::Contract(format!(
                    "segment {i} ends at {tau} but the next starts at {}",
                    right.start_time()
                )));
            }
            if next_jump < jump_times.len() && (jump_times[next_jump] - tau).abs() <= BASE_TOL * (1.0 + tau.abs()) {
                let fill = &fills[next_jump];
                if !same_point(fill.curve.start(), left.end()) || !same_point(fill.curve.end(), right.start()) {
                    return Err(Error::Contract(format!(
                        "fill {} does not bridge the left limit and the value at t = {tau}",
                        fill.jump_index
                    )));
                }
                boundary_fill.push(Some(next_jump));
                next_jump += 1;
            } else {
                if !same_point(left.end(), right.start()) {
                    return Err(Error::Contract(format!(
                        "path is discontinuous at t = {tau} without a jump"
                    )));
                }
                boundary_fill.push(None);
            }
        }
        if next_jump != jump_times.len() {
            return Err(Error::Contract(
                "every jump time must sit on a segment boundary".into(),
            ));
        }
        Ok(Self {
            segments,
            fills,
            jump_times,
            boundary_fill,
        })
    }

    pub fn segments(&self) -> &[PathSegment] {
        &self.segments
    }

    pub fn fills(&self) -> &[JumpFill] {
        &self.fills
    }

    pub fn jump_times(&self) -> &[f64] {
        &self.jump_times
    }

    /// Fill index following segment `i`, if that boundary is a jump.
    pub fn fill_after(&self, i: usize) -> Option<&JumpFill> {
        self.boundary_fill.get(i).copied().flatten().map(|k| &self.fills[k])
    }

    pub fn start_time(&self) -> f64 {
        self.segments[0].start_time()
    }

    pub fn end_time(&self) -> f64 {
        self.segments.last().unwrap().end_time()
    }

    pub fn dim(&self) -> usize {
        self.segments[0].dim()
    }

    fn check_range(&self, t: f64) -> Result<()> {
        if t < self.start_time() || t > self.end_time() || t.is_nan() {
            return Err(Error::Range {
                t,
                start: self.start_time(),
                end: self.end_time(),
            });
        }
        Ok(())
    }

    /// Index of the segment that owns `t` under càdlàg reading: the last
    /// segment whose start is `≤ t`.
    fn segment_at(&self, t: f64) -> usize {
        let k = self.segments.partition_point(|s| s.start_time() <= t);
        k.saturating_sub(1)
    }

    /// `γ(t)`, right-continuous at jumps.
    pub fn eval(&self, t: f64) -> Result<DVector<f64>> {
        self.check_range(t)?;
        Ok(self.segments[self.segment_at(t)].eval(t).0)
    }

    /// `lim_{s→t−} γ(s)`.
    pub fn left_limit(&self, t: f64) -> Result<DVector<f64>> {
        self.check_range(t)?;
        let mut i = self.segment_at(t);
        if i > 0 && self.segments[i].start_time() == t {
            i -= 1;
        }
        Ok(self.segments[i].eval(t).0)
    }

    /// Number of jump times in `(s, t]`.
    pub fn jumps_in(&self, s: f64, t: f64) -> usize {
        self.jump_times.iter().filter(|&&tau| tau > s && tau <= t).count()
    }
}

/// Parallel transport along `path` over `[s, t]` with respect to its fills:
/// the partial segment from `s`, then the fill of every jump in `(s, t]`
/// interleaved with the segments between them, up to `t`.
pub fn concat_transport(m: &ManifoldSpec, path: &PiecewisePath, s: f64, t: f64) -> Result<TransportMatrix> {
    path.check_range(s)?;
    path.check_range(t)?;
    if s > t {
        return Err(Error::Contract(format!("window start {s} is after its end {t}")));
    }
    let n = path.dim();
    let from = path.eval(s)?;
    let to = path.eval(t)?;
    let mut e = DMatrix::identity(n, n);
    if !m.is_flat() {
        for (i, seg) in path.segments.iter().enumerate() {
            if seg.start_time() > t {
                break;
            }
            if let Some(piece) = seg.restrict(s, t) {
                let frames = segment_frames(m, &piece, &e, None)?;
                e = frames.into_iter().last().unwrap();
            }
            let tau = seg.end_time();
            if let Some(fill) = path.fill_after(i) {
                if tau > s && tau <= t {
                    let frames = segment_frames(m, &fill.curve, &e, Some(fill.jump_index))?;
                    e = frames.into_iter().last().unwrap();
                }
            }
        }
    }
    checked(
        TransportMatrix {
            from_point: ChartPoint::new(from),
            to_point: ChartPoint::new(to),
            matrix: e,
        },
        t,
    )
}

/// Metric norm of `v` at `x`, or the Euclidean norm when there is no metric.
pub fn metric_norm(m: &ManifoldSpec, x: &DVector<f64>, v: &DVector<f64>) -> f64 {
    m.inner(x, v, v).unwrap_or_else(|| v.norm_squared()).sqrt()
}

/// Nearest isometry `T_from → T_to` to `matrix` in the metric's orthonormal
/// gauge (polar projection). Identity on manifolds without a metric.
pub fn metric_project(
    m: &ManifoldSpec,
    matrix: &DMatrix<f64>,
    from: &DVector<f64>,
    to: &DVector<f64>,
) -> DMatrix<f64> {
    let (Some(g_from), Some(g_to)) = (m.metric(from), m.metric(to)) else {
        return matrix.clone();
    };
    let (Some(l_from), Some(l_to)) = (g_from.cholesky(), g_to.cholesky()) else {
        return matrix.clone();
    };
    let l_from = l_from.l();
    let l_to = l_to.l();
    // orthonormal gauge: Q = L_toᵀ P L_from⁻ᵀ
    let l_from_t_inv = l_from.transpose().try_inverse().unwrap();
    let q = l_to.transpose() * matrix * &l_from_t_inv;
    let svd = q.svd(true, true);
    let q = svd.u.unwrap() * svd.v_t.unwrap();
    l_to.transpose().try_inverse().unwrap() * q * l_from.transpose()
}
