//! Coordinate-chart model of a fiber bundle `p: E → B`.
//!
//! A point of `E` is presented as `(chart, b, f)` with `b` a base coordinate
//! inside the chart's outer box `Vᵢ` and `f` the fiber coordinate of the
//! trivialization `φᵢ`. Transition maps `t_{ji}(b, f)` convert fiber
//! coordinates between charts; base coordinates are shared by all charts.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::real::{dist, lit, norm, to_f64_vec, Real};

/// Strict-interior margin used for overlap membership tests.
pub const OVERLAP_MARGIN: f64 = 1e-9;

/// Axis-aligned open box.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoxDomain<T> {
    pub lo: Vec<T>,
    pub hi: Vec<T>,
}

impl<T: Real> BoxDomain<T> {
    pub fn new(lo: Vec<T>, hi: Vec<T>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::InvalidArgument("box bounds must have equal, positive length".into()));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a < b)) {
            return Err(Error::InvalidArgument("box must have positive volume".into()));
        }
        Ok(Self { lo, hi })
    }

    pub fn interval(lo: T, hi: T) -> Result<Self> {
        Self::new(vec![lo], vec![hi])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn width(&self, k: usize) -> T {
        self.hi[k] - self.lo[k]
    }

    pub fn center(&self) -> Vec<T> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&a, &b)| (a + b) * lit(0.5))
            .collect()
    }

    /// Signed distance to the boundary (positive inside, max-norm sense).
    pub fn margin(&self, x: &[T]) -> T {
        (0..self.dim()).fold(T::infinity(), |m, k| {
            m.min(x[k] - self.lo[k]).min(self.hi[k] - x[k])
        })
    }

    /// Margin measured in units of each side's width.
    pub fn relative_margin(&self, x: &[T]) -> T {
        (0..self.dim()).fold(T::infinity(), |m, k| {
            let w = self.width(k);
            m.min((x[k] - self.lo[k]) / w).min((self.hi[k] - x[k]) / w)
        })
    }

    pub fn contains_open(&self, x: &[T], margin: T) -> bool {
        x.len() == self.dim() && self.margin(x) > margin
    }

    pub fn contains_closed(&self, x: &[T]) -> bool {
        x.len() == self.dim() && self.margin(x) >= T::zero()
    }

    /// Box shrunk by `frac` of its width on every side.
    pub fn shrunk(&self, frac: T) -> Self {
        let (lo, hi) = (0..self.dim())
            .map(|k| {
                let d = self.width(k) * frac;
                (self.lo[k] + d, self.hi[k] - d)
            })
            .unzip();
        Self { lo, hi }
    }

    pub fn expanded(&self, pad: T) -> Self {
        Self {
            lo: self.lo.iter().map(|&a| a - pad).collect(),
            hi: self.hi.iter().map(|&b| b + pad).collect(),
        }
    }

    /// Intersection, `None` when empty (open boxes touching at a face do not intersect).
    pub fn intersect(&self, other: &Self) -> Option<Self> {
        let lo: Vec<T> = self.lo.iter().zip(&other.lo).map(|(&a, &b)| a.max(b)).collect();
        let hi: Vec<T> = self.hi.iter().zip(&other.hi).map(|(&a, &b)| a.min(b)).collect();
        if lo.iter().zip(&hi).all(|(a, b)| a < b) {
            Some(Self { lo, hi })
        } else {
            None
        }
    }

    /// Distance from the closure of the box (0 inside).
    pub fn outside_distance(&self, x: &[T]) -> T {
        (0..self.dim())
            .map(|k| {
                let d = (self.lo[k] - x[k]).max(x[k] - self.hi[k]).max(T::zero());
                d * d
            })
            .sum::<T>()
            .sqrt()
    }

    /// Cell-centred grid with `per_dim` points per axis (strictly interior).
    pub fn interior_grid(&self, per_dim: usize) -> Vec<Vec<T>> {
        self.grid_with(per_dim, |k, i| {
            self.lo[k] + self.width(k) * (T::from_usize_lossy(i) + lit(0.5)) / T::from_usize_lossy(per_dim)
        })
    }

    /// Grid including the faces (samples the closure).
    pub fn closed_grid(&self, per_dim: usize) -> Vec<Vec<T>> {
        let per_dim = per_dim.max(2);
        self.grid_with(per_dim, |k, i| {
            self.lo[k] + self.width(k) * T::from_usize_lossy(i) / T::from_usize_lossy(per_dim - 1)
        })
    }

    fn grid_with(&self, per_dim: usize, coord: impl Fn(usize, usize) -> T) -> Vec<Vec<T>> {
        let d = self.dim();
        let total = per_dim.pow(d as u32);
        (0..total)
            .map(|mut idx| {
                (0..d)
                    .map(|k| {
                        let i = idx % per_dim;
                        idx /= per_dim;
                        coord(k, i)
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BaseTopology<T> {
    EuclideanBox,
    /// One-dimensional periodic base; coordinates are taken modulo the circumference.
    Circle { circumference: T },
}

/// The base `B`, represented by its bounded region of interest.
#[derive(Clone, Debug)]
pub struct BaseSpace<T> {
    pub topology: BaseTopology<T>,
    pub bounds: BoxDomain<T>,
}

impl<T: Real> BaseSpace<T> {
    pub fn euclidean_box(bounds: BoxDomain<T>) -> Self {
        Self {
            topology: BaseTopology::EuclideanBox,
            bounds,
        }
    }

    pub fn circle(circumference: T) -> Result<Self> {
        Ok(Self {
            topology: BaseTopology::Circle { circumference },
            bounds: BoxDomain::interval(T::zero(), circumference)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    /// Reduces periodic coordinates into the fundamental domain.
    pub fn wrap(&self, b: &[T]) -> Vec<T> {
        match self.topology {
            BaseTopology::EuclideanBox => b.to_vec(),
            BaseTopology::Circle { circumference } => b.iter().map(|&x| wrap_periodic(x, circumference)).collect(),
        }
    }
}

pub(crate) fn wrap_periodic<T: Real>(x: T, period: T) -> T {
    let r = x - (x / period).floor() * period;
    if r >= period {
        r - period
    } else {
        r
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FiberTopology<T> {
    Euclidean,
    Circle { circumference: T },
}

pub type ScalarField<T> = Arc<dyn Fn(&[T]) -> T + Send + Sync>;
pub type VectorField<T> = Arc<dyn Fn(&[T]) -> Vec<T> + Send + Sync>;

/// Fiber model `F` with its height function `h: F → ℝ`.
#[derive(Clone)]
pub struct FiberModel<T> {
    pub dim: usize,
    pub topology: FiberTopology<T>,
    height: ScalarField<T>,
    height_grad: VectorField<T>,
    default_height: bool,
    /// Declared properness constants: `h(f) ≥ α|f| − β`.
    pub alpha: T,
    pub beta: T,
}

impl<T: fmt::Debug> fmt::Debug for FiberModel<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FiberModel")
            .field("dim", &self.dim)
            .field("topology", &self.topology)
            .field("default_height", &self.default_height)
            .finish()
    }
}

impl<T: Real> FiberModel<T> {
    /// `ℝᵐ` with the default height `√(1 + |f|²)`.
    pub fn euclidean(dim: usize) -> Self {
        Self {
            dim,
            topology: FiberTopology::Euclidean,
            height: Arc::new(|f: &[T]| (T::one() + f.iter().map(|&x| x * x).sum::<T>()).sqrt()),
            height_grad: Arc::new(|f: &[T]| {
                let h = (T::one() + f.iter().map(|&x| x * x).sum::<T>()).sqrt();
                f.iter().map(|&x| x / h).collect()
            }),
            default_height: true,
            alpha: T::one(),
            beta: T::zero(),
        }
    }

    /// Circle of length 2π. The height is carried but irrelevant (compact fiber).
    pub fn circle() -> Self {
        let mut m = Self::euclidean(1);
        m.topology = FiberTopology::Circle {
            circumference: T::PI() + T::PI(),
        };
        m
    }

    pub fn with_height(
        mut self,
        height: ScalarField<T>,
        grad: VectorField<T>,
        alpha: T,
        beta: T,
    ) -> Result<Self> {
        if !(alpha > T::zero()) || beta < T::zero() {
            return Err(Error::InvalidArgument("properness requires alpha > 0, beta >= 0".into()));
        }
        self.height = height;
        self.height_grad = grad;
        self.default_height = false;
        self.alpha = alpha;
        self.beta = beta;
        Ok(self)
    }

    pub fn is_compact(&self) -> bool {
        matches!(self.topology, FiberTopology::Circle { .. })
    }

    pub fn height(&self, f: &[T]) -> T {
        (self.height)(f)
    }

    pub fn height_grad(&self, f: &[T]) -> Vec<T> {
        (self.height_grad)(f)
    }

    pub fn wrap(&self, f: &[T]) -> Vec<T> {
        match self.topology {
            FiberTopology::Euclidean => f.to_vec(),
            FiberTopology::Circle { circumference } => {
                f.iter().map(|&x| wrap_periodic(x, circumference)).collect()
            }
        }
    }

    /// Point on the ray `r·dir` (`dir` unit) where the height equals `level`.
    /// `None` when the level is not attained along the ray.
    pub fn level_point(&self, level: T, dir: &[T]) -> Option<Vec<T>> {
        let r = if self.default_height {
            let r2 = level * level - T::one();
            if r2 < T::zero() {
                return None;
            }
            r2.sqrt()
        } else {
            self.level_radius_bisect(level, dir)?
        };
        Some(dir.iter().map(|&d| d * r).collect())
    }

    fn level_radius_bisect(&self, level: T, dir: &[T]) -> Option<T> {
        let at = |r: T| self.height(&dir.iter().map(|&d| d * r).collect::<Vec<_>>()) - level;
        if at(T::zero()) > T::zero() {
            return None;
        }
        let mut hi = T::one();
        let mut tries = 0;
        while at(hi) < T::zero() {
            hi = hi * lit(2.0);
            tries += 1;
            if tries > 200 {
                return None;
            }
        }
        let mut lo = T::zero();
        for _ in 0..200 {
            let mid = (lo + hi) * lit(0.5);
            if at(mid) < T::zero() {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= T::epsilon() * hi.max(T::one()) {
                break;
            }
        }
        Some((lo + hi) * lit(0.5))
    }

    /// Unit directions used to parametrise level sets.
    pub fn level_directions(&self, samples: usize) -> Vec<Vec<T>> {
        unit_directions(self.dim, samples)
    }
}

/// Deterministic unit directions in `ℝᵐ`: `±1` for m = 1, an angular grid for
/// m = 2, and a spiral point set on the sphere otherwise.
pub fn unit_directions<T: Real>(m: usize, samples: usize) -> Vec<Vec<T>> {
    match m {
        1 => vec![vec![-T::one()], vec![T::one()]],
        2 => (0..samples.max(4))
            .map(|i| {
                let a = T::PI() * lit(2.0) * T::from_usize_lossy(i) / T::from_usize_lossy(samples.max(4));
                vec![a.cos(), a.sin()]
            })
            .collect(),
        _ => {
            let n = samples.max(8);
            (0..n)
                .map(|i| {
                    // golden spiral in the first three coordinates
                    let z = T::one() - lit::<T>(2.0) * (T::from_usize_lossy(i) + lit(0.5)) / T::from_usize_lossy(n);
                    let r = (T::one() - z * z).max(T::zero()).sqrt();
                    let phi = lit::<T>(2.399_963_229_728_653) * T::from_usize_lossy(i);
                    let mut v = vec![T::zero(); m];
                    v[0] = r * phi.cos();
                    v[1] = r * phi.sin();
                    v[2] = z;
                    v
                })
                .collect()
        }
    }
}

/// Trivializing chart: inner box `Uᵢ` with closure inside the outer box `Vᵢ`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Chart<T> {
    pub id: usize,
    pub inner: BoxDomain<T>,
    pub outer: BoxDomain<T>,
}

impl<T: Real> Chart<T> {
    pub fn new(id: usize, inner: BoxDomain<T>, outer: BoxDomain<T>) -> Result<Self> {
        if inner.dim() != outer.dim() {
            return Err(Error::InvalidAtlas(format!("chart {id}: inner/outer dimension mismatch")));
        }
        let margin = (0..inner.dim()).fold(T::infinity(), |m, k| {
            m.min(inner.lo[k] - outer.lo[k]).min(outer.hi[k] - inner.hi[k])
        });
        if !(margin > T::zero()) {
            return Err(Error::InvalidAtlas(format!(
                "chart {id}: closure of the inner box must lie strictly inside the outer box"
            )));
        }
        Ok(Self { id, inner, outer })
    }

    /// Smallest gap between `closure(Uᵢ)` and `∂Vᵢ`.
    pub fn collar(&self) -> T {
        (0..self.inner.dim()).fold(T::infinity(), |m, k| {
            m.min(self.inner.lo[k] - self.outer.lo[k])
                .min(self.outer.hi[k] - self.inner.hi[k])
        })
    }
}

pub type FiberMapFn<T> = Arc<dyn Fn(&[T], &[T]) -> Vec<T> + Send + Sync>;
pub type JacobianFn<T> = Arc<dyn Fn(&[T], &[T]) -> Mat<T> + Send + Sync>;

/// `t_{ji}(b, f)`: fiber coordinates of chart `source` to those of chart `target`.
#[derive(Clone)]
pub struct TransitionMap<T> {
    pub source: usize,
    pub target: usize,
    map: FiberMapFn<T>,
    jac_base: Option<JacobianFn<T>>,
    jac_fiber: Option<JacobianFn<T>>,
}

impl<T> fmt::Debug for TransitionMap<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TransitionMap")
            .field("source", &self.source)
            .field("target", &self.target)
            .field("analytic_jacobians", &(self.jac_base.is_some(), self.jac_fiber.is_some()))
            .finish()
    }
}

/// Central-difference step `1e-5 · max(1, |x|)`.
#[inline]
pub(crate) fn fd_step<T: Real>(x: T) -> T {
    lit::<T>(1e-5) * x.abs().max(T::one())
}

impl<T: Real> TransitionMap<T> {
    pub fn new(source: usize, target: usize, map: FiberMapFn<T>) -> Self {
        Self {
            source,
            target,
            map,
            jac_base: None,
            jac_fiber: None,
        }
    }

    pub fn with_jacobians(mut self, jac_base: JacobianFn<T>, jac_fiber: JacobianFn<T>) -> Self {
        self.jac_base = Some(jac_base);
        self.jac_fiber = Some(jac_fiber);
        self
    }

    pub fn has_analytic_jacobians(&self) -> bool {
        self.jac_base.is_some() && self.jac_fiber.is_some()
    }

    pub fn apply(&self, b: &[T], f: &[T]) -> Vec<T> {
        (self.map)(b, f)
    }

    /// `∂_b t` (m × n).
    pub fn jacobian_base(&self, b: &[T], f: &[T]) -> Mat<T> {
        match &self.jac_base {
            Some(j) => j(b, f),
            None => self.fd_jacobian_base(b, f),
        }
    }

    /// `∂_f t` (m × m).
    pub fn jacobian_fiber(&self, b: &[T], f: &[T]) -> Mat<T> {
        match &self.jac_fiber {
            Some(j) => j(b, f),
            None => self.fd_jacobian_fiber(b, f),
        }
    }

    pub fn fd_jacobian_base(&self, b: &[T], f: &[T]) -> Mat<T> {
        let m = f.len();
        let mut jac = Mat::zeros(m, b.len());
        let mut bp = b.to_vec();
        for k in 0..b.len() {
            let h = fd_step(b[k]);
            bp[k] = b[k] + h;
            let plus = self.apply(&bp, f);
            bp[k] = b[k] - h;
            let minus = self.apply(&bp, f);
            bp[k] = b[k];
            for r in 0..m {
                jac[(r, k)] = (plus[r] - minus[r]) / (h + h);
            }
        }
        jac
    }

    pub fn fd_jacobian_fiber(&self, b: &[T], f: &[T]) -> Mat<T> {
        let m = f.len();
        let mut jac = Mat::zeros(m, m);
        let mut fp = f.to_vec();
        for k in 0..m {
            let h = fd_step(f[k]);
            fp[k] = f[k] + h;
            let plus = self.apply(b, &fp);
            fp[k] = f[k] - h;
            let minus = self.apply(b, &fp);
            fp[k] = f[k];
            for r in 0..m {
                jac[(r, k)] = (plus[r] - minus[r]) / (h + h);
            }
        }
        jac
    }
}

/// Point of `E` in chart coordinates.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BundlePoint<T> {
    pub chart: usize,
    pub base: Vec<T>,
    pub fiber: Vec<T>,
}

impl<T: Real> BundlePoint<T> {
    pub fn new(chart: usize, base: Vec<T>, fiber: Vec<T>) -> Self {
        Self { chart, base, fiber }
    }
}

/// Finite atlas `{(Uᵢ, Vᵢ, φᵢ)}` with its transition table.
#[derive(Clone, Debug)]
pub struct BundleAtlas<T> {
    pub base: BaseSpace<T>,
    pub fiber: FiberModel<T>,
    charts: Vec<Chart<T>>,
    transitions: BTreeMap<(usize, usize), TransitionMap<T>>,
}

impl<T: Real> BundleAtlas<T> {
    /// Charts must be numbered `0..len` in order.
    pub fn new(base: BaseSpace<T>, fiber: FiberModel<T>, charts: Vec<Chart<T>>) -> Result<Self> {
        if charts.is_empty() {
            return Err(Error::InvalidAtlas("atlas needs at least one chart".into()));
        }
        if fiber.dim == 0 {
            return Err(Error::InvalidAtlas("fiber dimension must be positive".into()));
        }
        for (i, c) in charts.iter().enumerate() {
            if c.id != i {
                return Err(Error::InvalidAtlas(format!("chart at position {i} has id {}", c.id)));
            }
            if c.inner.dim() != base.dim() {
                return Err(Error::InvalidAtlas(format!("chart {i} has wrong base dimension")));
            }
        }
        Ok(Self {
            base,
            fiber,
            charts,
            transitions: BTreeMap::new(),
        })
    }

    /// Single-chart product bundle over the base region.
    pub fn product(base: BaseSpace<T>, fiber: FiberModel<T>) -> Result<Self> {
        let inner = base.bounds.clone();
        let pad = (0..inner.dim()).fold(T::infinity(), |m, k| m.min(inner.width(k))) * lit(0.1);
        let chart = Chart::new(0, inner.clone(), inner.expanded(pad))?;
        Self::new(base, fiber, vec![chart])
    }

    pub fn add_transition(&mut self, t: TransitionMap<T>) -> Result<()> {
        if t.source >= self.charts.len() || t.target >= self.charts.len() {
            return Err(Error::InvalidAtlas(format!(
                "transition {} -> {} references an unknown chart",
                t.source, t.target
            )));
        }
        self.transitions.insert((t.source, t.target), t);
        Ok(())
    }

    /// Checks that every overlapping pair has both transitions registered.
    pub fn check_transitions(&self) -> Result<()> {
        for i in 0..self.charts.len() {
            for j in 0..self.charts.len() {
                if i != j
                    && self.charts[i].outer.intersect(&self.charts[j].outer).is_some()
                    && !self.transitions.contains_key(&(i, j))
                {
                    return Err(Error::MissingTransition { from: i, to: j });
                }
            }
        }
        Ok(())
    }

    pub fn dim_base(&self) -> usize {
        self.base.dim()
    }

    pub fn dim_fiber(&self) -> usize {
        self.fiber.dim
    }

    pub fn charts(&self) -> &[Chart<T>] {
        &self.charts
    }

    pub fn chart(&self, id: usize) -> Result<&Chart<T>> {
        self.charts.get(id).ok_or(Error::UnknownChart(id))
    }

    pub fn transition(&self, from: usize, to: usize) -> Result<&TransitionMap<T>> {
        self.transitions
            .get(&(from, to))
            .ok_or(Error::MissingTransition { from, to })
    }

    pub fn in_outer(&self, chart: usize, b: &[T]) -> bool {
        self.charts
            .get(chart)
            .map_or(false, |c| c.outer.contains_open(b, lit(OVERLAP_MARGIN)))
    }

    pub fn in_inner(&self, chart: usize, b: &[T]) -> bool {
        self.charts
            .get(chart)
            .map_or(false, |c| c.inner.contains_open(b, lit(OVERLAP_MARGIN)))
    }

    /// Chart whose `Uᵢ` contains `b` deepest (relative margin); falls back to
    /// the deepest `Vᵢ`.
    pub fn best_chart(&self, b: &[T]) -> Option<usize> {
        let pick = |inner: bool| {
            self.charts
                .iter()
                .filter(|c| if inner { self.in_inner(c.id, b) } else { self.in_outer(c.id, b) })
                .map(|c| {
                    let m = if inner { c.inner.relative_margin(b) } else { c.outer.relative_margin(b) };
                    (c.id, m)
                })
                .fold(None, |best: Option<(usize, T)>, (id, m)| match best {
                    Some((_, bm)) if bm >= m => best,
                    _ => Some((id, m)),
                })
                .map(|(id, _)| id)
        };
        pick(true).or_else(|| pick(false))
    }

    fn check_overlap(&self, from: usize, to: usize, b: &[T]) -> Result<()> {
        self.chart(from)?;
        self.chart(to)?;
        if !(self.in_outer(from, b) && self.in_outer(to, b)) {
            return Err(Error::OutOfOverlap {
                from,
                to,
                base: to_f64_vec(b),
            });
        }
        Ok(())
    }

    /// Fiber coordinates of chart `from` expressed in chart `to` (identity when equal).
    pub fn transform_fiber(&self, from: usize, to: usize, b: &[T], f: &[T]) -> Result<Vec<T>> {
        self.check_overlap(from, to, b)?;
        if from == to {
            return Ok(f.to_vec());
        }
        let out = self.transition(from, to)?.apply(b, f);
        Ok(self.fiber.wrap(&out))
    }

    /// `(∂_b t_{to,from}, ∂_f t_{to,from})` at `(b, f)` in chart `from`.
    pub fn transition_jacobians(&self, from: usize, to: usize, b: &[T], f: &[T]) -> Result<(Mat<T>, Mat<T>)> {
        self.check_overlap(from, to, b)?;
        if from == to {
            return Ok((Mat::zeros(f.len(), b.len()), Mat::identity(f.len())));
        }
        let t = self.transition(from, to)?;
        Ok((t.jacobian_base(b, f), t.jacobian_fiber(b, f)))
    }

    /// Re-expresses `pt` in chart `target`.
    pub fn change_chart(&self, pt: &BundlePoint<T>, target: usize) -> Result<BundlePoint<T>> {
        let fiber = self.transform_fiber(pt.chart, target, &pt.base, &pt.fiber)?;
        Ok(BundlePoint {
            chart: target,
            base: pt.base.clone(),
            fiber,
        })
    }

    /// `h(π₂ φᵢ(e))` in the point's own chart.
    pub fn height_of(&self, pt: &BundlePoint<T>) -> T {
        self.fiber.height(&pt.fiber)
    }

    /// Fiber sample points used by validators.
    pub fn fiber_samples(&self, per_dim: usize, half_width: T) -> Vec<Vec<T>> {
        let per_dim = per_dim.max(2);
        let bx = match self.fiber.topology {
            FiberTopology::Euclidean => BoxDomain {
                lo: vec![-half_width; self.fiber.dim],
                hi: vec![half_width; self.fiber.dim],
            },
            FiberTopology::Circle { circumference } => BoxDomain {
                lo: vec![T::zero(); self.fiber.dim],
                hi: vec![circumference; self.fiber.dim],
            },
        };
        bx.interior_grid(per_dim)
    }

    /// Sampled diagnostics: cocycle and round-trip residuals, fiber Jacobian
    /// conditioning, analytic-vs-difference Jacobians and cover gaps.
    pub fn validate(&self, samples: usize) -> AtlasReport {
        let samples = samples.max(1);
        let base_pts = self.base.bounds.interior_grid(samples);
        let fiber_pts = self.fiber_samples(samples.min(9).max(3), lit(3.0));
        let k = self.charts.len();

        let mut cocycle = T::zero();
        let mut identity = T::zero();
        let mut min_det = T::infinity();
        let mut jac_mismatch = T::zero();
        let mut gaps = Vec::new();

        for b in &base_pts {
            if !self.charts.iter().any(|c| self.in_inner(c.id, b)) {
                gaps.push(to_f64_vec(b));
            }
            let here: Vec<usize> = (0..k).filter(|&i| self.in_outer(i, b)).collect();
            for f in &fiber_pts {
                for &i in &here {
                    for &j in &here {
                        if i == j {
                            // t_ii is the identity by construction
                            let same = self.transform_fiber(i, i, b, f).unwrap_or_default();
                            identity = identity.max(dist(&same, f));
                            continue;
                        }
                        let Ok(tji) = self.transition(i, j) else { continue };
                        let fj = self.fiber.wrap(&tji.apply(b, f));
                        let det = tji.jacobian_fiber(b, f).det().abs();
                        min_det = min_det.min(det);
                        if tji.has_analytic_jacobians() {
                            let rel = |a: &Mat<T>, d: &Mat<T>| a.sub(d).max_abs() / d.max_abs().max(T::one());
                            jac_mismatch = jac_mismatch
                                .max(rel(&tji.jacobian_base(b, f), &tji.fd_jacobian_base(b, f)))
                                .max(rel(&tji.jacobian_fiber(b, f), &tji.fd_jacobian_fiber(b, f)));
                        }
                        if let Ok(tij) = self.transition(j, i) {
                            let back = self.fiber.wrap(&tij.apply(b, &fj));
                            identity = identity.max(self.fiber_distance(&back, f));
                        }
                        for &l in &here {
                            if l == j {
                                continue;
                            }
                            let direct = if l == i {
                                f.to_vec()
                            } else {
                                match self.transition(i, l) {
                                    Ok(t) => self.fiber.wrap(&t.apply(b, f)),
                                    Err(_) => continue,
                                }
                            };
                            if let Ok(tlj) = self.transition(j, l) {
                                let via = self.fiber.wrap(&tlj.apply(b, &fj));
                                cocycle = cocycle.max(self.fiber_distance(&via, &direct));
                            }
                        }
                    }
                }
            }
        }

        AtlasReport {
            base_samples: base_pts.len(),
            fiber_samples: fiber_pts.len(),
            max_cocycle_residual: cocycle.to_f64_lossy(),
            max_identity_residual: identity.to_f64_lossy(),
            min_abs_fiber_jacobian_det: if min_det.is_finite() { min_det.to_f64_lossy() } else { 1.0 },
            max_jacobian_mismatch: jac_mismatch.to_f64_lossy(),
            cover_gaps: gaps,
        }
    }

    /// Distance in fiber coordinates, periodic for circle fibers.
    pub fn fiber_distance(&self, a: &[T], b: &[T]) -> T {
        match self.fiber.topology {
            FiberTopology::Euclidean => dist(a, b),
            FiberTopology::Circle { circumference } => {
                let d: Vec<T> = a
                    .iter()
                    .zip(b)
                    .map(|(&x, &y)| {
                        let r = wrap_periodic(x - y, circumference);
                        r.min(circumference - r)
                    })
                    .collect();
                norm(&d)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AtlasReport {
    pub base_samples: usize,
    pub fiber_samples: usize,
    pub max_cocycle_residual: f64,
    pub max_identity_residual: f64,
    pub min_abs_fiber_jacobian_det: f64,
    pub max_jacobian_mismatch: f64,
    pub cover_gaps: Vec<Vec<f64>>,
}

impl AtlasReport {
    pub fn is_clean(&self, tol: f64) -> bool {
        self.max_cocycle_residual <= tol
            && self.max_identity_residual <= tol
            && self.min_abs_fiber_jacobian_det > 0.0
            && self.cover_gaps.is_empty()
    }
}

/// Shear transition pair `t₁₀(b, f) = f + s·Σb`, `t₀₁(b, f) = f − s·Σb` with analytic Jacobians.
pub fn shear_pair<T: Real>(i: usize, j: usize, slope: T) -> (TransitionMap<T>, TransitionMap<T>) {
    let make = |src, tgt, s: T| {
        TransitionMap::new(
            src,
            tgt,
            Arc::new(move |b: &[T], f: &[T]| {
                let shift = b.iter().copied().sum::<T>() * s;
                f.iter().map(|&x| x + shift).collect()
            }),
        )
        .with_jacobians(
            Arc::new(move |b: &[T], f: &[T]| Mat::from_fn(f.len(), b.len(), |_, _| s)),
            Arc::new(|_b: &[T], f: &[T]| Mat::identity(f.len())),
        )
    };
    (make(i, j, slope), make(j, i, -slope))
}

/// Identity transition pair between two charts.
pub fn identity_pair<T: Real>(i: usize, j: usize) -> (TransitionMap<T>, TransitionMap<T>) {
    shear_pair(i, j, T::zero())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_chart_shear() -> BundleAtlas<f64> {
        let base = BaseSpace::euclidean_box(BoxDomain::interval(-2.0, 2.0).unwrap());
        let c0 = Chart::new(0, BoxDomain::interval(-2.0, 0.5).unwrap(), BoxDomain::interval(-3.0, 1.0).unwrap()).unwrap();
        let c1 = Chart::new(1, BoxDomain::interval(-0.5, 2.0).unwrap(), BoxDomain::interval(-1.0, 3.0).unwrap()).unwrap();
        let mut atlas = BundleAtlas::new(base, FiberModel::euclidean(1), vec![c0, c1]).unwrap();
        let (a, b) = shear_pair(0, 1, 1.0);
        atlas.add_transition(a).unwrap();
        atlas.add_transition(b).unwrap();
        atlas
    }

    #[test]
    fn identity_transition_keeps_coordinates() {
        let base = BaseSpace::euclidean_box(BoxDomain::interval(-1.0, 1.0).unwrap());
        let c0 = Chart::new(0, BoxDomain::interval(-1.0, 0.8).unwrap(), BoxDomain::interval(-2.0, 1.5).unwrap()).unwrap();
        let c1 = Chart::new(1, BoxDomain::interval(0.0, 1.0).unwrap(), BoxDomain::interval(-0.5, 2.0).unwrap()).unwrap();
        let mut atlas = BundleAtlas::new(base, FiberModel::euclidean(1), vec![c0, c1]).unwrap();
        let (a, b) = identity_pair(0, 1);
        atlas.add_transition(a).unwrap();
        atlas.add_transition(b).unwrap();
        let pt = BundlePoint::new(0, vec![0.5], vec![2.0]);
        let q = atlas.change_chart(&pt, 1).unwrap();
        assert_eq!(q, BundlePoint::new(1, vec![0.5], vec![2.0]));
    }

    #[test]
    fn shear_transition_and_round_trip() {
        let atlas = two_chart_shear();
        let pt = BundlePoint::new(0, vec![0.75], vec![2.0]);
        let q = atlas.change_chart(&pt, 1).unwrap();
        assert_eq!(q.fiber, vec![2.75]);
        let back = atlas.change_chart(&q, 0).unwrap();
        assert!((back.fiber[0] - 2.0).abs() < 1e-12);

        // b = 1.0 is on the boundary of V₀ = (−3, 1): outside the open overlap
        let edge = BundlePoint::new(0, vec![1.0], vec![2.0]);
        assert!(matches!(atlas.change_chart(&edge, 1), Err(Error::OutOfOverlap { .. })));
    }

    #[test]
    fn shear_example_in_wider_overlap() {
        let base = BaseSpace::euclidean_box(BoxDomain::interval(-2.0, 2.0).unwrap());
        let c0 = Chart::new(0, BoxDomain::interval(-2.0, 1.5).unwrap(), BoxDomain::interval(-3.0, 2.0).unwrap()).unwrap();
        let c1 = Chart::new(1, BoxDomain::interval(-0.5, 2.0).unwrap(), BoxDomain::interval(-1.0, 3.0).unwrap()).unwrap();
        let mut atlas = BundleAtlas::new(base, FiberModel::euclidean(1), vec![c0, c1]).unwrap();
        let (a, b) = shear_pair(0, 1, 1.0);
        atlas.add_transition(a).unwrap();
        atlas.add_transition(b).unwrap();
        let q = atlas.change_chart(&BundlePoint::new(0, vec![1.0], vec![2.0]), 1).unwrap();
        assert_eq!(q, BundlePoint::new(1, vec![1.0], vec![3.0]));
    }

    #[test]
    fn missing_transition_is_reported() {
        let base = BaseSpace::euclidean_box(BoxDomain::interval(-2.0, 2.0).unwrap());
        let c0 = Chart::new(0, BoxDomain::interval(-2.0, 0.5).unwrap(), BoxDomain::interval(-3.0, 1.0).unwrap()).unwrap();
        let c1 = Chart::new(1, BoxDomain::interval(-0.5, 2.0).unwrap(), BoxDomain::interval(-1.0, 3.0).unwrap()).unwrap();
        let atlas = BundleAtlas::new(base, FiberModel::euclidean(1), vec![c0, c1]).unwrap();
        let pt = BundlePoint::new(0, vec![0.0], vec![1.0]);
        assert_eq!(atlas.change_chart(&pt, 1), Err(Error::MissingTransition { from: 0, to: 1 }));
        assert!(atlas.check_transitions().is_err());
    }

    #[test]
    fn default_height_values() {
        let atlas = two_chart_shear();
        let h0 = atlas.height_of(&BundlePoint::new(0, vec![0.0], vec![0.0]));
        assert_eq!(h0, 1.0);
        let h1 = atlas.height_of(&BundlePoint::new(0, vec![0.0], vec![3.0_f64.sqrt()]));
        assert!((h1 - 2.0).abs() < 1e-15);
        // chart-relative: the same point has a different height in chart 1
        let pt = BundlePoint::new(0, vec![0.25], vec![1.0]);
        let other = atlas.change_chart(&pt, 1).unwrap();
        assert!(atlas.height_of(&pt) != atlas.height_of(&other));
    }

    #[test]
    fn default_level_set_is_symmetric_pair() {
        let fiber = FiberModel::<f64>::euclidean(1);
        for n in 1..6 {
            let level = n as f64;
            let pts: Vec<f64> = fiber
                .level_directions(2)
                .iter()
                .map(|d| fiber.level_point(level, d).unwrap()[0])
                .collect();
            let r = (level * level - 1.0).sqrt();
            assert!((pts[0] + r).abs() < 1e-15 && (pts[1] - r).abs() < 1e-15);
        }
        assert!(fiber.level_point(0.5, &[1.0]).is_none());
    }

    #[test]
    fn custom_height_level_by_bisection() {
        let fiber = FiberModel::<f64>::euclidean(1)
            .with_height(
                Arc::new(|f: &[f64]| 1.0 + f[0] * f[0]),
                Arc::new(|f: &[f64]| vec![2.0 * f[0]]),
                1.0,
                1.0,
            )
            .unwrap();
        let p = fiber.level_point(5.0, &[1.0]).unwrap();
        assert!((p[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn validate_single_chart_is_clean() {
        let base = BaseSpace::euclidean_box(BoxDomain::interval(-1.0, 1.0).unwrap());
        let atlas = BundleAtlas::<f64>::product(base, FiberModel::euclidean(1)).unwrap();
        let r = atlas.validate(16);
        assert_eq!(r.max_cocycle_residual, 0.0);
        assert_eq!(r.max_identity_residual, 0.0);
        assert!(r.cover_gaps.is_empty());
    }

    #[test]
    fn validate_two_chart_shear_has_no_gaps() {
        let r = two_chart_shear().validate(64);
        assert!(r.cover_gaps.is_empty());
        assert!(r.max_cocycle_residual < 1e-12);
        assert!(r.max_identity_residual < 1e-12);
        assert!(r.max_jacobian_mismatch < 1e-5);
        assert_eq!(r.min_abs_fiber_jacobian_det, 1.0);
    }

    #[test]
    fn validate_reports_broken_cocycle() {
        let mut atlas = two_chart_shear();
        atlas
            .add_transition(TransitionMap::new(
                0,
                1,
                Arc::new(|b: &[f64], f: &[f64]| vec![f[0] + b[0] + 0.1]),
            ))
            .unwrap();
        let r = atlas.validate(32);
        assert!(r.max_identity_residual >= 0.1 - 1e-12);
        assert!(r.max_cocycle_residual >= 0.1 - 1e-12);
    }

    #[test]
    fn cover_gap_detected() {
        let base = BaseSpace::euclidean_box(BoxDomain::interval(-2.0, 2.0).unwrap());
        let c0 = Chart::new(0, BoxDomain::interval(-2.0, -0.5).unwrap(), BoxDomain::interval(-3.0, 0.0).unwrap()).unwrap();
        let c1 = Chart::new(1, BoxDomain::interval(0.5, 2.0).unwrap(), BoxDomain::interval(0.0, 3.0).unwrap()).unwrap();
        let atlas = BundleAtlas::new(base, FiberModel::<f64>::euclidean(1), vec![c0, c1]).unwrap();
        let r = atlas.validate(40);
        assert!(!r.cover_gaps.is_empty());
        assert!(r.cover_gaps.iter().all(|g| g[0] > -0.5 - 1e-12 && g[0] < 0.5 + 1e-12));
    }

    #[test]
    fn chart_requires_margin() {
        let u = BoxDomain::interval(0.0, 1.0).unwrap();
        assert!(Chart::new(0, u.clone(), u.clone()).is_err());
        assert!(Chart::new(0, u, BoxDomain::interval(-0.1, 1.1).unwrap()).is_ok());
    }

    #[test]
    fn circle_base_wraps() {
        let base = BaseSpace::<f64>::circle(1.0).unwrap();
        assert!((base.wrap(&[2.25])[0] - 0.25).abs() < 1e-15);
        assert!((base.wrap(&[-0.25])[0] - 0.75).abs() < 1e-15);
    }
}
