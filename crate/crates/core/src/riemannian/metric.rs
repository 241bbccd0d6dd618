use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::bundle::BoxDomain;
use crate::connection::Connection;
use crate::error::{Error, Result};
use crate::lift::switch_target;
use crate::linalg::Mat;
use crate::real::{lit, to_f64_vec, Real};

/// Riemannian metric given chartwise as a Gram matrix `G(x)`.
pub trait Metric<T: Real>: Send + Sync {
    fn dim(&self) -> usize;

    /// Leading coordinates that form the base point.
    fn base_dim(&self) -> usize;

    fn in_domain(&self, chart: usize, x: &[T]) -> bool;

    fn matrix(&self, chart: usize, x: &[T]) -> Result<Mat<T>>;

    /// `∂ₖG` for every coordinate `k`.
    fn derivatives(&self, chart: usize, x: &[T]) -> Result<Vec<Mat<T>>> {
        fd_derivatives(self, chart, x)
    }

    /// Chart a trajectory at `x` should move to, if any.
    fn switch_chart(&self, _chart: usize, _x: &[T]) -> Option<usize> {
        None
    }

    /// Position and velocity expressed in another chart.
    fn transfer(&self, from: usize, to: usize, x: &[T], v: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        if from == to {
            Ok((x.to_vec(), v.to_vec()))
        } else {
            Err(Error::UnknownChart(to))
        }
    }

    /// Height of the fiber part, used in traces.
    fn height(&self, x: &[T]) -> T {
        let f = &x[self.base_dim()..];
        (T::one() + f.iter().map(|&v| v * v).sum::<T>()).sqrt()
    }
}

pub(crate) fn metric_fd_step<T: Real>(x: T) -> T {
    lit::<T>(1e-4) * x.abs().max(T::one())
}

/// Central differences of `G` with step `1e-4·max(1, |xₖ|)`.
pub fn fd_derivatives<T: Real, M: Metric<T> + ?Sized>(metric: &M, chart: usize, x: &[T]) -> Result<Vec<Mat<T>>> {
    let mut out = Vec::with_capacity(x.len());
    let mut xp = x.to_vec();
    for k in 0..x.len() {
        let h = metric_fd_step(x[k]);
        xp[k] = x[k] + h;
        let gp = metric.matrix(chart, &xp)?;
        xp[k] = x[k] - h;
        let gm = metric.matrix(chart, &xp)?;
        xp[k] = x[k];
        out.push(gp.sub(&gm).scale(T::one() / (h + h)));
    }
    Ok(out)
}

/// `g(v, w)` at `x`.
pub fn metric_eval<T: Real, M: Metric<T> + ?Sized>(metric: &M, chart: usize, x: &[T], v: &[T], w: &[T]) -> Result<T> {
    if x.len() != metric.dim() || v.len() != metric.dim() || w.len() != metric.dim() {
        return Err(Error::InvalidArgument("dimension mismatch in metric evaluation".into()));
    }
    if !metric.in_domain(chart, x) {
        return Err(Error::OutOfDomain(to_f64_vec(x)));
    }
    Ok(metric.matrix(chart, x)?.bilinear(v, w))
}

/// Christoffel symbols of the second kind: entry `k` holds `Γᵏᵢⱼ`.
pub fn christoffel_from<T: Real>(g: &Mat<T>, dg: &[Mat<T>]) -> Result<Vec<Mat<T>>> {
    let d = g.rows();
    let inv = g.inverse().ok_or_else(|| Error::DegenerateMetric(vec![]))?;
    // first kind: Γ_{l,ij} = ½(∂ᵢg_jl + ∂ⱼg_il − ∂_l g_ij)
    let first: Vec<Mat<T>> = (0..d)
        .map(|l| {
            Mat::from_fn(d, d, |i, j| {
                (dg[i][(j, l)] + dg[j][(i, l)] - dg[l][(i, j)]) * lit(0.5)
            })
        })
        .collect();
    Ok((0..d)
        .map(|k| {
            let mut m = Mat::zeros(d, d);
            for (l, fl) in first.iter().enumerate() {
                m.axpy(inv[(k, l)], fl);
            }
            m
        })
        .collect())
}

pub fn christoffel<T: Real, M: Metric<T> + ?Sized>(metric: &M, chart: usize, x: &[T]) -> Result<Vec<Mat<T>>> {
    let g = metric.matrix(chart, x)?;
    let dg = metric.derivatives(chart, x)?;
    christoffel_from(&g, &dg).map_err(|_| Error::DegenerateMetric(to_f64_vec(x)))
}

/// `−Γᵏᵢⱼ vⁱ vʲ`, solved directly from `G a = −c`.
pub(crate) fn geodesic_acceleration<T: Real>(g: &Mat<T>, dg: &[Mat<T>], v: &[T]) -> Option<Vec<T>> {
    let d = v.len();
    let c: Vec<T> = (0..d)
        .map(|l| {
            let mut s = T::zero();
            for i in 0..d {
                let dgv = (0..d).fold(T::zero(), |acc, j| acc + dg[i][(j, l)] * v[j]);
                s += v[i] * dgv;
            }
            s - dg[l].bilinear(v, v) * lit(0.5)
        })
        .collect();
    let a = g.solve(&c)?;
    Some(a.into_iter().map(|x| -x).collect())
}

/// Euclidean metric on a box (or all of `ℝᵈ`).
#[derive(Clone, Debug)]
pub struct FlatMetric<T> {
    pub dim: usize,
    pub base_dim: usize,
    pub domain: Option<BoxDomain<T>>,
}

impl<T: Real> FlatMetric<T> {
    pub fn new(dim: usize, base_dim: usize, domain: Option<BoxDomain<T>>) -> Self {
        Self { dim, base_dim, domain }
    }
}

impl<T: Real> Metric<T> for FlatMetric<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn base_dim(&self) -> usize {
        self.base_dim
    }

    fn in_domain(&self, chart: usize, x: &[T]) -> bool {
        chart == 0 && self.domain.as_ref().map_or(true, |d| d.contains_open(x, T::zero()))
    }

    fn matrix(&self, _chart: usize, _x: &[T]) -> Result<Mat<T>> {
        Ok(Mat::identity(self.dim))
    }

    fn derivatives(&self, _chart: usize, _x: &[T]) -> Result<Vec<Mat<T>>> {
        Ok(vec![Mat::zeros(self.dim, self.dim); self.dim])
    }
}

pub type VerticalMetricFn<T> = Arc<dyn Fn(usize, &[T], &[T]) -> Result<Mat<T>> + Send + Sync>;
pub type BaseMetricFn<T> = Arc<dyn Fn(&[T]) -> Mat<T> + Send + Sync>;
pub type FiberMetricFn<T> = Arc<dyn Fn(&[T]) -> Mat<T> + Send + Sync>;

/// `‖(v, w)‖² = g_B(v, v) + g_V(w − Γv, w − Γv)`.
#[derive(Clone)]
pub struct FiberedMetric<T: Real> {
    connection: Connection<T>,
    vertical: VerticalMetricFn<T>,
    base: BaseMetricFn<T>,
    pub switch_shrink: T,
    name: String,
}

impl<T: Real> fmt::Debug for FiberedMetric<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FiberedMetric")
            .field("name", &self.name)
            .field("connection", &self.connection.name())
            .finish()
    }
}

pub fn flat_base<T: Real>(n: usize) -> BaseMetricFn<T> {
    Arc::new(move |_b: &[T]| Mat::identity(n))
}

impl<T: Real> FiberedMetric<T> {
    pub fn new(connection: Connection<T>, vertical: VerticalMetricFn<T>, base: BaseMetricFn<T>) -> Self {
        let name = format!("fibered({})", connection.name());
        Self {
            connection,
            vertical,
            base,
            switch_shrink: lit(0.05),
            name,
        }
    }

    /// Flat vertical and base metrics in every chart.
    pub fn with_flat_pieces(connection: Connection<T>) -> Self {
        let atlas = connection.atlas().clone();
        let m = atlas.dim_fiber();
        Self::new(
            connection,
            Arc::new(move |_c: usize, _b: &[T], _f: &[T]| Ok(Mat::identity(m))),
            flat_base(atlas.dim_base()),
        )
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn connection(&self) -> &Connection<T> {
        &self.connection
    }

    pub fn base_metric(&self, b: &[T]) -> Mat<T> {
        (self.base)(b)
    }

    pub fn base_metric_fn(&self) -> BaseMetricFn<T> {
        self.base.clone()
    }

    pub fn vertical_metric(&self, chart: usize, b: &[T], f: &[T]) -> Result<Mat<T>> {
        (self.vertical)(chart, b, f)
    }

    /// `(Γ, g_V, g_B)` at a point.
    pub fn parts(&self, chart: usize, b: &[T], f: &[T]) -> Result<(Mat<T>, Mat<T>, Mat<T>)> {
        Ok((
            self.connection.coefficient(chart, b, f)?,
            self.vertical_metric(chart, b, f)?,
            self.base_metric(b),
        ))
    }

    /// Assembled Gram matrix from its three pieces.
    pub fn assemble(gamma: &Mat<T>, gv: &Mat<T>, gb: &Mat<T>) -> Mat<T> {
        let n = gb.rows();
        let m = gv.rows();
        let gvg = gv.matmul(gamma);
        let mut g = Mat::zeros(n + m, n + m);
        g.set_block(0, 0, &gb.add(&gamma.transpose().matmul(&gvg)));
        let off = gvg.scale(-T::one());
        g.set_block(n, 0, &off);
        g.set_block(0, n, &off.transpose());
        g.set_block(n, n, gv);
        g
    }

    /// Sampled invariants: SPD margins and fiber independence of horizontal norms.
    pub fn check(&self, base_per_dim: usize, fiber_per_dim: usize, fiber_half_width: T) -> Result<FiberedMetricReport> {
        let atlas = self.connection.atlas();
        let n = atlas.dim_base();
        let fibers = atlas.fiber_samples(fiber_per_dim, fiber_half_width);
        let mut min_v = f64::INFINITY;
        let mut min_b = f64::INFINITY;
        let mut residual = T::zero();
        let mut samples = 0;
        for b in atlas.base.bounds.interior_grid(base_per_dim) {
            let Some(c) = atlas.best_chart(&b) else { continue };
            let gb = self.base_metric(&b);
            min_b = min_b.min(gb.spd_margin().to_f64_lossy());
            for k in 0..n {
                let mut v = vec![T::zero(); n];
                v[k] = T::one();
                let reference = gb.bilinear(&v, &v);
                for f in &fibers {
                    let (gamma, gv, _) = self.parts(c, &b, f)?;
                    min_v = min_v.min(gv.spd_margin().to_f64_lossy());
                    let g = Self::assemble(&gamma, &gv, &gb);
                    let mut x = v.clone();
                    x.extend(gamma.mul_vec(&v));
                    residual = residual.max((g.bilinear(&x, &x) - reference).abs());
                    samples += 1;
                }
            }
        }
        Ok(FiberedMetricReport {
            samples,
            min_vertical_spd_margin: min_v,
            min_base_spd_margin: min_b,
            horizontal_norm_residual: residual.to_f64_lossy(),
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FiberedMetricReport {
    pub samples: usize,
    pub min_vertical_spd_margin: f64,
    pub min_base_spd_margin: f64,
    pub horizontal_norm_residual: f64,
}

impl<T: Real> Metric<T> for FiberedMetric<T> {
    fn dim(&self) -> usize {
        let a = self.connection.atlas();
        a.dim_base() + a.dim_fiber()
    }

    fn base_dim(&self) -> usize {
        self.connection.atlas().dim_base()
    }

    fn in_domain(&self, chart: usize, x: &[T]) -> bool {
        let n = self.base_dim();
        let atlas = self.connection.atlas();
        chart < atlas.charts().len()
            && atlas.base.bounds.contains_closed(&x[..n])
            && self.connection.defined_at(chart, &x[..n])
    }

    fn matrix(&self, chart: usize, x: &[T]) -> Result<Mat<T>> {
        let n = self.base_dim();
        let (b, f) = x.split_at(n);
        if !self.in_domain(chart, x) {
            return Err(Error::OutOfDomain(to_f64_vec(x)));
        }
        let (gamma, gv, gb) = self.parts(chart, b, f)?;
        Ok(Self::assemble(&gamma, &gv, &gb))
    }

    fn switch_chart(&self, chart: usize, x: &[T]) -> Option<usize> {
        switch_target(self.connection.atlas(), chart, &x[..self.base_dim()], self.switch_shrink)
    }

    fn transfer(&self, from: usize, to: usize, x: &[T], v: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        if from == to {
            return Ok((x.to_vec(), v.to_vec()));
        }
        let atlas = self.connection.atlas();
        let n = self.base_dim();
        let (b, f) = x.split_at(n);
        let (vb, vf) = v.split_at(n);
        let f2 = atlas.transform_fiber(from, to, b, f)?;
        let (jb, jf) = atlas.transition_jacobians(from, to, b, f)?;
        let w: Vec<T> = jb.mul_vec(vb).iter().zip(jf.mul_vec(vf)).map(|(&p, q)| p + q).collect();
        let mut x2 = b.to_vec();
        x2.extend(f2);
        let mut v2 = vb.to_vec();
        v2.extend(w);
        Ok((x2, v2))
    }

    fn height(&self, x: &[T]) -> T {
        self.connection.atlas().fiber.height(&x[self.base_dim()..])
    }
}

/// Second-order jet of a scalar function of `(x, y)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Jet2<T> {
    pub value: T,
    pub dx: T,
    pub dy: T,
    pub dxx: T,
    pub dxy: T,
    pub dyy: T,
}

pub type SurfaceComponentsFn<T> = Arc<dyn Fn(T, T) -> [T; 3] + Send + Sync>;
pub type SurfaceDerivativesFn<T> = Arc<dyn Fn(T, T) -> [[T; 3]; 2] + Send + Sync>;

/// Metric `g₁₁dx² + 2g₁₂dxdy + g₂₂dy²` on a planar domain; `x` is the base coordinate.
#[derive(Clone)]
pub struct SurfaceMetric<T> {
    pub domain: BoxDomain<T>,
    components: SurfaceComponentsFn<T>,
    derivatives: Option<SurfaceDerivativesFn<T>>,
    name: String,
}

impl<T> fmt::Debug for SurfaceMetric<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SurfaceMetric")
            .field("name", &self.name)
            .field("analytic_derivatives", &self.derivatives.is_some())
            .finish()
    }
}

impl<T: Real> SurfaceMetric<T> {
    pub fn new(domain: BoxDomain<T>, name: impl Into<String>, components: SurfaceComponentsFn<T>) -> Result<Self> {
        if domain.dim() != 2 {
            return Err(Error::InvalidArgument("surface metrics live on planar domains".into()));
        }
        Ok(Self {
            domain,
            components,
            derivatives: None,
            name: name.into(),
        })
    }

    pub fn with_derivatives(mut self, d: SurfaceDerivativesFn<T>) -> Self {
        self.derivatives = Some(d);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn has_analytic_derivatives(&self) -> bool {
        self.derivatives.is_some()
    }

    /// First fundamental form of the graph `z = φ(x, y)`, with analytic derivatives.
    pub fn graph(
        domain: BoxDomain<T>,
        name: impl Into<String>,
        jet: Arc<dyn Fn(T, T) -> Jet2<T> + Send + Sync>,
    ) -> Result<Self> {
        let j1 = jet.clone();
        let comps: SurfaceComponentsFn<T> = Arc::new(move |x, y| {
            let p = j1(x, y);
            [T::one() + p.dx * p.dx, p.dx * p.dy, T::one() + p.dy * p.dy]
        });
        let derivs: SurfaceDerivativesFn<T> = Arc::new(move |x, y| {
            let p = jet(x, y);
            let two: T = lit(2.0);
            [
                [two * p.dx * p.dxx, p.dxx * p.dy + p.dx * p.dxy, two * p.dy * p.dxy],
                [two * p.dx * p.dxy, p.dxy * p.dy + p.dx * p.dyy, two * p.dy * p.dyy],
            ]
        });
        Ok(Self::new(domain, name, comps)?.with_derivatives(derivs))
    }

    pub fn components(&self, x: T, y: T) -> [T; 3] {
        (self.components)(x, y)
    }

    /// Horizontal slope `−g₁₂/g₂₂` (the `g`-orthogonal complement of `∂_y`).
    pub fn horizontal_slope(&self, x: T, y: T) -> T {
        let [_, g12, g22] = self.components(x, y);
        -g12 / g22
    }

    /// Smallest of `g₁₁` and `det g` over a grid.
    pub fn spd_margin(&self, per_dim: usize) -> T {
        self.domain
            .interior_grid(per_dim)
            .iter()
            .map(|p| {
                let [a, b, c] = self.components(p[0], p[1]);
                a.min(a * c - b * b)
            })
            .fold(T::infinity(), T::min)
    }

    fn to_mat(c: [T; 3]) -> Mat<T> {
        Mat::from_row_slice(2, 2, &[c[0], c[1], c[1], c[2]])
    }
}

impl<T: Real> Metric<T> for SurfaceMetric<T> {
    fn dim(&self) -> usize {
        2
    }

    fn base_dim(&self) -> usize {
        1
    }

    fn in_domain(&self, chart: usize, x: &[T]) -> bool {
        chart == 0 && self.domain.contains_open(x, T::zero())
    }

    fn matrix(&self, chart: usize, x: &[T]) -> Result<Mat<T>> {
        if !self.in_domain(chart, x) {
            return Err(Error::OutOfDomain(to_f64_vec(x)));
        }
        Ok(Self::to_mat(self.components(x[0], x[1])))
    }

    fn derivatives(&self, chart: usize, x: &[T]) -> Result<Vec<Mat<T>>> {
        match &self.derivatives {
            Some(d) => {
                if !self.in_domain(chart, x) {
                    return Err(Error::OutOfDomain(to_f64_vec(x)));
                }
                let [dx, dy] = d(x[0], x[1]);
                Ok(vec![Self::to_mat(dx), Self::to_mat(dy)])
            }
            None => fd_derivatives(self, chart, x),
        }
    }
}
