//! The linear frame bundle `BM`: frames over chart points, horizontal and
//! vertical tangent vectors, horizontal lifts of càdlàg curves, and the
//! delay equation lifted to `BM`.
//!
//! A frame is stored as an `n×n` matrix whose column `i` holds the chart
//! components of the `i`-th frame vector. A bundle tangent at `(x, e)` is a
//! pair `(v, δe)`; it is horizontal when `δe = −Γ(x)[v] e`.

use nalgebra::{DMatrix, DVector};

use crate::drivers::DriverPath;
use crate::error::{Error, Result};
use crate::manifold::{ChartPoint, ManifoldSpec, Tangent, VectorFieldSpec};
use crate::solver::{integrate, EquationSpec, FrameRule, SolutionPath, SolverConfig};
use crate::transport::{concat_transport, segment_frames, PathSegment, PiecewisePath, SINGULAR_DET};

const HORIZONTAL_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct FramePoint {
    pub base: ChartPoint,
    pub frame: DMatrix<f64>,
}

impl FramePoint {
    pub fn new(base: ChartPoint, frame: DMatrix<f64>) -> Result<Self> {
        let n = base.dim();
        if frame.shape() != (n, n) {
            return Err(Error::Contract(format!("frame must be {n}×{n}, got {:?}", frame.shape())));
        }
        let det = frame.determinant();
        if !(det.abs() > SINGULAR_DET) {
            return Err(Error::Contract(format!("frame is singular (det = {det:e})")));
        }
        Ok(Self { base, frame })
    }

    /// The coordinate frame `∂_1, …, ∂_n` at `base`.
    pub fn coordinate(base: ChartPoint) -> Self {
        let n = base.dim();
        Self {
            base,
            frame: DMatrix::identity(n, n),
        }
    }

    /// `p·g`: the right action of `GL(n)`.
    pub fn act(&self, g: &DMatrix<f64>) -> Result<Self> {
        Self::new(self.base.clone(), &self.frame * g)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BundleTangent {
    pub base_component: DVector<f64>,
    pub frame_component: DMatrix<f64>,
}

impl BundleTangent {
    pub fn zero(n: usize) -> Self {
        Self {
            base_component: DVector::zeros(n),
            frame_component: DMatrix::zeros(n, n),
        }
    }

    pub fn is_vertical(&self) -> bool {
        self.base_component.iter().all(|&v| v == 0.0)
    }

    /// `max |δe + Γ(x)[v] e|`, zero for horizontal vectors.
    pub fn horizontality_residual(&self, m: &ManifoldSpec, p: &FramePoint) -> f64 {
        let expected = -m.christoffel(&p.base.coords).contract(&self.base_component) * &p.frame;
        (&self.frame_component - expected).amax()
    }

    /// Euclidean norm of the stacked components.
    pub fn norm(&self) -> f64 {
        (self.base_component.norm_squared() + self.frame_component.norm_squared()).sqrt()
    }
}

/// An element `A` of `gl(n)`; generates the vertical field `A*`.
#[derive(Clone, Debug, PartialEq)]
pub struct VerticalGenerator {
    pub algebra_element: DMatrix<f64>,
}

/// `v^H`: the horizontal vector at `p` projecting to `v`.
pub fn horizontal_lift_vector(m: &ManifoldSpec, p: &FramePoint, v: &Tangent) -> Result<BundleTangent> {
    if v.base != p.base {
        return Err(Error::Contract(format!(
            "vector based at {:?} cannot be lifted to a frame at {:?}",
            v.base.coords.as_slice(),
            p.base.coords.as_slice()
        )));
    }
    Ok(lift_components(m, &p.base.coords, &p.frame, &v.components))
}

fn lift_components(m: &ManifoldSpec, x: &DVector<f64>, e: &DMatrix<f64>, v: &DVector<f64>) -> BundleTangent {
    let n = x.len();
    let frame_component = if m.is_flat() {
        DMatrix::zeros(n, n)
    } else {
        -m.christoffel(x).contract(v) * e
    };
    BundleTangent {
        base_component: v.clone(),
        frame_component,
    }
}

/// `A*(p) = d/dt p·exp(tA)` at `t = 0`.
pub fn vertical_field(p: &FramePoint, a: &VerticalGenerator) -> BundleTangent {
    BundleTangent {
        base_component: DVector::zeros(p.base.dim()),
        frame_component: &p.frame * &a.algebra_element,
    }
}

/// A curve in `BM` over a càdlàg base path: one frame per node of the base
/// path, left limits at jump times, and frames along every fill.
#[derive(Clone, Debug)]
pub struct BundlePath {
    path: PiecewisePath,
    times: Vec<f64>,
    nodes: Vec<FramePoint>,
    left: Vec<Option<FramePoint>>,
    fill_frames: Vec<Vec<DMatrix<f64>>>,
}

impl BundlePath {
    pub fn base_path(&self) -> &PiecewisePath {
        &self.path
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn nodes(&self) -> &[FramePoint] {
        &self.nodes
    }

    pub fn left(&self, idx: usize) -> Option<&FramePoint> {
        self.left[idx].as_ref()
    }

    pub fn fill_frames(&self) -> &[Vec<DMatrix<f64>>] {
        &self.fill_frames
    }

    fn node_index(&self, t: f64) -> Option<usize> {
        let i = self.times.partition_point(|&s| s < t - 1e-12);
        (i < self.times.len() && (self.times[i] - t).abs() <= 1e-12).then_some(i)
    }

    /// The bundle point over `γ(t)`, right-continuous at jumps. Off the
    /// nodes the frame is transported from the preceding node.
    pub fn point_at(&self, m: &ManifoldSpec, t: f64) -> Result<FramePoint> {
        if let Some(i) = self.node_index(t) {
            return Ok(self.nodes[i].clone());
        }
        let x = self.path.eval(t)?;
        let i = self.times.partition_point(|&s| s <= t).saturating_sub(1);
        let p = concat_transport(m, &self.path, self.times[i], t)?;
        Ok(FramePoint {
            base: ChartPoint::new(x),
            frame: p.matrix * &self.nodes[i].frame,
        })
    }
}

/// Horizontal lift of a càdlàg path starting at `p0`: the frame at `t` is the
/// transport along the path (fills included) applied to `p0`.
pub fn lift_path(m: &ManifoldSpec, path: &PiecewisePath, p0: &FramePoint) -> Result<BundlePath> {
    let first = path.segments()[0].start();
    if first != &p0.base.coords {
        return Err(Error::Contract("initial frame is not over the start of the path".into()));
    }
    let mut times = Vec::new();
    let mut nodes: Vec<FramePoint> = Vec::new();
    let mut left = Vec::new();
    let mut fill_frames = Vec::new();
    let mut e = p0.frame.clone();
    let mut pending_left: Option<FramePoint> = None;
    for (i, seg) in path.segments().iter().enumerate() {
        let frames = segment_frames(m, seg, &e, None)?;
        for (j, ((t, x), f)) in seg.times().iter().zip(seg.points()).zip(&frames).enumerate() {
            let point = FramePoint {
                base: ChartPoint::new(x.clone()),
                frame: f.clone(),
            };
            if j == 0 && i > 0 {
                match pending_left.take() {
                    Some(l) => *left.last_mut().unwrap() = Some(l),
                    None => continue,
                }
                *nodes.last_mut().unwrap() = point;
                continue;
            }
            times.push(*t);
            nodes.push(point);
            left.push(None);
        }
        e = frames.last().unwrap().clone();
        if let Some(fill) = path.fill_after(i) {
            let along = segment_frames(m, &fill.curve, &e, Some(fill.jump_index))?;
            pending_left = Some(nodes.last().unwrap().clone());
            e = along.last().unwrap().clone();
            fill_frames.push(along);
        }
    }
    for p in &nodes {
        let det = p.frame.determinant();
        if !(det.abs() >= SINGULAR_DET) {
            return Err(Error::Singular { time: f64::NAN, det });
        }
    }
    Ok(BundlePath {
        path: path.clone(),
        times,
        nodes,
        left,
        fill_frames,
    })
}

/// Transport of a horizontal vector at `bundle(s)` to `bundle(t)` under the
/// connection on `BM`: the base part is transported along the base path and
/// lifted again at the target. Both directions of time are allowed.
pub fn transport_horizontal(
    m: &ManifoldSpec,
    bundle: &BundlePath,
    s: f64,
    t: f64,
    w: &BundleTangent,
) -> Result<BundleTangent> {
    let from = bundle.point_at(m, s)?;
    let residual = w.horizontality_residual(m, &from);
    let scale = 1.0 + w.frame_component.amax() + w.base_component.amax();
    if residual > HORIZONTAL_TOL * scale {
        return Err(Error::Contract(format!(
            "vector is not horizontal (residual {residual:e}); vertical transport is not supported"
        )));
    }
    let to = bundle.point_at(m, t)?;
    let p = if s <= t {
        concat_transport(m, bundle.base_path(), s, t)?
    } else {
        concat_transport(m, bundle.base_path(), t, s)?.inverse()?
    };
    let v = &p.matrix * &w.base_component;
    Ok(lift_components(m, &to.base.coords, &to.frame, &v))
}

fn check_start(eq: &EquationSpec, p0: &FramePoint) -> Result<()> {
    if eq.initial_curve.start() != &p0.base.coords {
        return Err(Error::Contract("initial frame is not over β₀(−d)".into()));
    }
    Ok(())
}

/// The deterministic equation lifted to `BM`, started from the horizontal
/// lift of `β₀` at `p0`. Returned frames are the frame part of `u(t)`.
pub fn solve_lifted_ddej(
    eq: &EquationSpec,
    p0: &FramePoint,
    driver: &DriverPath,
    cfg: &SolverConfig,
) -> Result<SolutionPath> {
    if driver.m() != 0 {
        return Err(Error::Config("the deterministic solver takes a driver with m = 0".into()));
    }
    check_start(eq, p0)?;
    integrate(eq, driver, cfg, FrameRule::Horizontal, p0.frame.clone())
}

/// The stochastic equation lifted to `BM`.
pub fn solve_lifted_sddej(
    eq: &EquationSpec,
    p0: &FramePoint,
    driver: &DriverPath,
    cfg: &SolverConfig,
) -> Result<SolutionPath> {
    check_start(eq, p0)?;
    integrate(eq, driver, cfg, FrameRule::Horizontal, p0.frame.clone())
}

/// Sup-norm distances between a lifted solution and a lifted base path on
/// the shared grid nodes (left limits included).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LiftDiscrepancy {
    pub frame: f64,
    pub base: f64,
}

pub fn lift_discrepancy(lifted: &SolutionPath, bundle: &BundlePath) -> Result<LiftDiscrepancy> {
    let mut out = LiftDiscrepancy { frame: 0.0, base: 0.0 };
    for (i, &t) in lifted.times().iter().enumerate() {
        let j = bundle
            .node_index(t)
            .ok_or_else(|| Error::Grid(format!("lifted path has node {t} missing from the bundle path")))?;
        let mut pairs = vec![(&lifted.nodes()[i], &bundle.nodes[j])];
        if let (Some(a), Some(b)) = (lifted.left(i), bundle.left(j)) {
            pairs.push((a, b));
        }
        for (a, b) in pairs {
            out.frame = out.frame.max((&a.frame - &b.frame).amax());
            out.base = out.base.max((&a.x - &b.base.coords).amax());
        }
    }
    Ok(out)
}

/// `∇_X Y = X^b ∂_b Y + Γ(X, Y)`, with `∂Y` by central differences.
pub fn covariant_derivative(m: &ManifoldSpec, x_field: &VectorFieldSpec, y_field: &VectorFieldSpec, x: &DVector<f64>) -> DVector<f64> {
    let xv = x_field.apply(x);
    let mut out = m.christoffel(x).bilinear(&xv, &y_field.apply(x));
    for b in 0..x.len() {
        if xv[b] == 0.0 {
            continue;
        }
        let delta = 1e-5 * x[b].abs().max(1.0);
        let mut up = x.clone();
        let mut down = x.clone();
        up[b] += delta;
        down[b] -= delta;
        out += (y_field.apply(&up) - y_field.apply(&down)) * (xv[b] / (2.0 * delta));
    }
    out
}

const FLOW_SUBSTEPS: usize = 8;

/// Residual of `∇^H_{X^H} Y^H = (∇_X Y)^H` at `p`: `Y^H` is carried back
/// along the integral curve of `X^H` over time `ε`, differenced with
/// `Y^H(p)` and divided by `ε`. Expected to be `O(ε)`.
pub fn check_nabla_h_horizontal(
    m: &ManifoldSpec,
    x_field: &VectorFieldSpec,
    y_field: &VectorFieldSpec,
    p: &FramePoint,
    eps: f64,
) -> Result<f64> {
    if !m.connection().symmetric {
        return Err(Error::Config("the bundle connection needs a torsion-free base connection".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::Config(format!("finite-difference step {eps} must be positive")));
    }
    // integral curve of X from p.base, sampled for a Hermite segment
    let ds = eps / FLOW_SUBSTEPS as f64;
    let mut x = p.base.coords.clone();
    let mut times = vec![0.0];
    let mut points = vec![x.clone()];
    let mut velocities = vec![x_field.apply(&x)];
    for k in 0..FLOW_SUBSTEPS {
        let k1 = x_field.apply(&x);
        let k2 = x_field.apply(&(&x + &k1 * (0.5 * ds)));
        let k3 = x_field.apply(&(&x + &k2 * (0.5 * ds)));
        let k4 = x_field.apply(&(&x + &k3 * ds));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (ds / 6.0);
        m.check(&x, (k + 1) as f64 * ds, None)?;
        times.push(if k + 1 == FLOW_SUBSTEPS { eps } else { (k + 1) as f64 * ds });
        points.push(x.clone());
        velocities.push(x_field.apply(&x));
    }
    let base = PiecewisePath::new(vec![PathSegment::new(times, points, velocities)?], vec![], vec![])?;
    let bundle = lift_path(m, &base, p)?;
    let end = bundle.point_at(m, eps)?;
    let y_end = lift_components(m, &end.base.coords, &end.frame, &y_field.apply(&end.base.coords));
    let back = transport_horizontal(m, &bundle, eps, 0.0, &y_end)?;
    let y_here = lift_components(m, &p.base.coords, &p.frame, &y_field.apply(&p.base.coords));
    let target = lift_components(m, &p.base.coords, &p.frame, &covariant_derivative(m, x_field, y_field, &p.base.coords));
    let diff = BundleTangent {
        base_component: (back.base_component - y_here.base_component) / eps - target.base_component,
        frame_component: (back.frame_component - y_here.frame_component) / eps - target.frame_component,
    };
    Ok(diff.norm())
}
