//! Chart-based manifolds with a connection.
//!
//! Every manifold lives in a single coordinate chart. Points outside the
//! chart's validity domain are rejected rather than handed to another chart,
//! so trajectories that leave the chart end in [`Error::DomainExit`].

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A point in chart coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct ChartPoint {
    pub coords: DVector<f64>,
}

impl ChartPoint {
    pub fn new(coords: DVector<f64>) -> Self {
        Self { coords }
    }

    pub fn from_slice(coords: &[f64]) -> Self {
        Self::new(DVector::from_column_slice(coords))
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }
}

/// A tangent vector with coordinate components `v^a ∂_a` at `base`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tangent {
    pub base: ChartPoint,
    pub components: DVector<f64>,
}

impl Tangent {
    pub fn new(base: ChartPoint, components: DVector<f64>) -> Self {
        debug_assert_eq!(base.dim(), components.len());
        Self { base, components }
    }

    pub fn zero(base: ChartPoint) -> Self {
        let n = base.dim();
        Self::new(base, DVector::zeros(n))
    }
}

/// Christoffel symbols `Γ^a_{bc}` at one point, stored densely as `n×n×n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Christoffel {
    n: usize,
    data: Vec<f64>,
}

impl Christoffel {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n * n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize, c: usize) -> f64 {
        self.data[(a * self.n + b) * self.n + c]
    }

    #[inline]
    pub fn set(&mut self, a: usize, b: usize, c: usize, value: f64) {
        self.data[(a * self.n + b) * self.n + c] = value;
    }

    /// Sets `Γ^a_{bc}` and `Γ^a_{cb}` together.
    pub fn set_sym(&mut self, a: usize, b: usize, c: usize, value: f64) {
        self.set(a, b, c, value);
        self.set(a, c, b, value);
    }

    /// The matrix `K^a_c = Σ_b Γ^a_{bc} v^b`, so that the transport equation
    /// along velocity `v` reads `E' = -K E`.
    pub fn contract(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let n = self.n;
        DMatrix::from_fn(n, n, |a, c| (0..n).map(|b| self.get(a, b, c) * v[b]).sum())
    }

    /// `Γ^a_{bc} u^b w^c`.
    pub fn bilinear(&self, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        self.contract(u) * w
    }

    /// `max |Γ^a_{bc} − Γ^a_{cb}|`.
    pub fn max_asymmetry(&self) -> f64 {
        let n = self.n;
        let mut worst = 0.0_f64;
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    worst = worst.max((self.get(a, b, c) - self.get(a, c, b)).abs());
                }
            }
        }
        worst
    }
}

pub type ChristoffelFn = Arc<dyn Fn(&DVector<f64>) -> Christoffel + Send + Sync>;
pub type DomainFn = Arc<dyn Fn(&DVector<f64>) -> bool + Send + Sync>;
pub type MetricFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type FieldFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// An affine connection given by closed-form Christoffel symbols.
#[derive(Clone)]
pub struct ConnectionSpec {
    christoffel: ChristoffelFn,
    /// Torsion-free indicator: `Γ^a_{bc} = Γ^a_{cb}`.
    pub symmetric: bool,
    /// `Γ ≡ 0`; transport short-circuits to the identity.
    pub flat: bool,
}

impl ConnectionSpec {
    pub fn new(christoffel: ChristoffelFn, symmetric: bool) -> Self {
        Self {
            christoffel,
            symmetric,
            flat: false,
        }
    }

    pub fn flat(n: usize) -> Self {
        Self {
            christoffel: Arc::new(move |_| Christoffel::zeros(n)),
            symmetric: true,
            flat: true,
        }
    }

    pub fn christoffel(&self, x: &DVector<f64>) -> Christoffel {
        (self.christoffel)(x)
    }
}

/// A manifold `(M, ∇)` in one chart.
#[derive(Clone)]
pub struct ManifoldSpec {
    name: String,
    dim: usize,
    connection: ConnectionSpec,
    domain: DomainFn,
    metric: Option<MetricFn>,
}

impl fmt::Debug for ManifoldSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ManifoldSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("flat", &self.connection.flat)
            .field("symmetric", &self.connection.symmetric)
            .field("metric", &self.metric.is_some())
            .finish()
    }
}

impl ManifoldSpec {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        connection: ConnectionSpec,
        domain: DomainFn,
        metric: Option<MetricFn>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("manifold dimension must be at least 1".into()));
        }
        Ok(Self {
            name: name.into(),
            dim,
            connection,
            domain,
            metric,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn connection(&self) -> &ConnectionSpec {
        &self.connection
    }

    pub fn is_flat(&self) -> bool {
        self.connection.flat
    }

    pub fn christoffel(&self, x: &DVector<f64>) -> Christoffel {
        self.connection.christoffel(x)
    }

    pub fn has_metric(&self) -> bool {
        self.metric.is_some()
    }

    pub fn metric(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        self.metric.as_ref().map(|g| g(x))
    }

    /// `g_x(v, w)`, when the manifold carries a metric.
    pub fn inner(&self, x: &DVector<f64>, v: &DVector<f64>, w: &DVector<f64>) -> Option<f64> {
        self.metric(x).map(|g| v.dot(&(g * w)))
    }

    /// Chart membership without the dimension check.
    #[inline]
    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.len() == self.dim && x.iter().all(|c| c.is_finite()) && (self.domain)(x)
    }

    pub fn validate_point(&self, x: &ChartPoint) -> Result<bool> {
        if x.dim() != self.dim {
            return Err(Error::Contract(format!(
                "point has {} coordinates, manifold {} has dimension {}",
                x.dim(),
                self.name,
                self.dim
            )));
        }
        Ok(self.contains(&x.coords))
    }

    /// Errors with [`Error::DomainExit`] (or [`Error::NonFinite`]) when `x`
    /// is not a valid chart point at model time `time`.
    pub fn check(&self, x: &DVector<f64>, time: f64, jump: Option<usize>) -> Result<()> {
        if x.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite { time });
        }
        if !(self.domain)(x) {
            return Err(Error::DomainExit {
                time,
                jump,
                coords: x.iter().copied().collect(),
            });
        }
        Ok(())
    }
}

pub fn euclidean(n: usize) -> Result<ManifoldSpec> {
    let metric: MetricFn = Arc::new(move |_| DMatrix::identity(n, n));
    ManifoldSpec::new(
        format!("euclidean({n})"),
        n,
        ConnectionSpec::flat(n),
        Arc::new(|_| true),
        Some(metric),
    )
}

/// The unit circle in its angle coordinate. No wrapping: the angle is a
/// coordinate on the universal cover.
pub fn circle() -> ManifoldSpec {
    let metric: MetricFn = Arc::new(|_| DMatrix::identity(1, 1));
    ManifoldSpec::new("circle", 1, ConnectionSpec::flat(1), Arc::new(|_| true), Some(metric))
        .expect("dimension is positive")
}

/// Round unit sphere in spherical coordinates `(θ, φ)`, `0 < θ < π`, with
/// metric `dθ² + sin²θ dφ²` and its Levi-Civita connection.
pub fn sphere2() -> ManifoldSpec {
    let christoffel: ChristoffelFn = Arc::new(|x| {
        let (s, c) = x[0].sin_cos();
        let mut g = Christoffel::zeros(2);
        g.set(0, 1, 1, -s * c);
        g.set_sym(1, 0, 1, c / s);
        g
    });
    let metric: MetricFn = Arc::new(|x| {
        let s = x[0].sin();
        DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, s * s]))
    });
    ManifoldSpec::new(
        "sphere2",
        2,
        ConnectionSpec::new(christoffel, true),
        Arc::new(|x| x[0] > 0.0 && x[0] < std::f64::consts::PI),
        Some(metric),
    )
    .expect("dimension is positive")
}

/// Upper half-plane `y > 0` with the hyperbolic metric `(dx² + dy²)/y²`.
pub fn halfplane() -> ManifoldSpec {
    let christoffel: ChristoffelFn = Arc::new(|x| {
        let inv = 1.0 / x[1];
        let mut g = Christoffel::zeros(2);
        g.set_sym(0, 0, 1, -inv);
        g.set(1, 0, 0, inv);
        g.set(1, 1, 1, -inv);
        g
    });
    let metric: MetricFn = Arc::new(|x| DMatrix::identity(2, 2) / (x[1] * x[1]));
    ManifoldSpec::new(
        "halfplane",
        2,
        ConnectionSpec::new(christoffel, true),
        Arc::new(|x| x[1] > 0.0),
        Some(metric),
    )
    .expect("dimension is positive")
}

/// Looks up a catalog manifold: `euclidean(n)`, `sphere2`, `halfplane` or
/// `circle`.
pub fn builtin_manifold(name: &str) -> Result<ManifoldSpec> {
    let name = name.trim();
    match name {
        "sphere2" => return Ok(sphere2()),
        "halfplane" => return Ok(halfplane()),
        "circle" => return Ok(circle()),
        _ => {}
    }
    if let Some(rest) = name.strip_prefix("euclidean(").and_then(|r| r.strip_suffix(')')) {
        let n: usize = rest
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad euclidean dimension in {name:?}")))?;
        return euclidean(n);
    }
    Err(Error::Config(format!("unknown manifold {name:?}")))
}

/// A smooth vector field, evaluated in chart coordinates.
#[derive(Clone)]
pub struct VectorFieldSpec {
    label: String,
    f: FieldFn,
}

impl fmt::Debug for VectorFieldSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VectorFieldSpec").field("label", &self.label).finish()
    }
}

impl VectorFieldSpec {
    pub fn new(label: impl Into<String>, f: FieldFn) -> Self {
        Self { label: label.into(), f }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Raw component evaluation; the caller is responsible for the domain.
    #[inline]
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.f)(x)
    }

    pub fn eval(&self, m: &ManifoldSpec, x: &ChartPoint) -> Result<Tangent> {
        if !m.validate_point(x)? {
            return Err(Error::DomainExit {
                time: f64::NAN,
                jump: None,
                coords: x.coords.iter().copied().collect(),
            });
        }
        Ok(Tangent::new(x.clone(), self.apply(&x.coords)))
    }

    pub fn zero(n: usize) -> Self {
        Self::new("zero", Arc::new(move |_| DVector::zeros(n)))
    }

    /// Coordinate-constant field.
    pub fn constant(value: DVector<f64>) -> Self {
        Self::new("constant", Arc::new(move |_| value.clone()))
    }

    /// `x ↦ M x + b` in chart coordinates.
    pub fn affine(matrix: DMatrix<f64>, offset: DVector<f64>) -> Self {
        Self::new("affine", Arc::new(move |x| &matrix * x + &offset))
    }

    /// `(x₁, x₂) ↦ (−x₂, x₁)` on a 2-dimensional chart.
    pub fn rotation2() -> Self {
        Self::new("rotation", Arc::new(|x| DVector::from_vec(vec![-x[1], x[0]])))
    }

    /// Infinitesimal rotation of the unit sphere about the ambient x-axis,
    /// in spherical coordinates. A Killing field that crosses latitudes.
    pub fn sphere_x_rotation(omega: f64) -> Self {
        Self::new(
            "sphere_x_rotation",
            Arc::new(move |x| {
                let (sp, cp) = x[1].sin_cos();
                let cot = x[0].cos() / x[0].sin();
                DVector::from_vec(vec![-omega * sp, -omega * cot * cp])
            }),
        )
    }
}

pub fn eval_field(f: &VectorFieldSpec, m: &ManifoldSpec, x: &ChartPoint) -> Result<Tangent> {
    f.eval(m, x)
}
