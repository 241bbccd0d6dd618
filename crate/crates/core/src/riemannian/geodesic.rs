use std::cell::{Cell, RefCell};
use std::fmt;

use serde::Serialize;

use super::metric::{fd_derivatives, geodesic_acceleration, FiberedMetric, Metric};
use crate::bundle::BundlePoint;
use crate::error::{Error, Result};
use crate::lift::{horizontal_lift, BaseCurve, LiftOptions, LiftTrace};
use crate::linalg::Mat;
use crate::ode::{integrate, Control, IntegratorOptions, OdeSystem, StepFault, StepInfo, Termination};
use crate::real::{dist, lit, max_abs, to_f64_vec, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum GeodesicStatus<T> {
    Completed,
    /// Left the coordinate domain of every chart (e.g. the base window).
    LeftDomain(T),
    StepUnderflow(T),
    /// Coordinates exceeded the escape radius.
    Escaped(T),
}

impl<T: Real> GeodesicStatus<T> {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Completed => "Completed",
            Self::LeftDomain(_) => "LeftDomain",
            Self::StepUnderflow(_) => "StepUnderflow",
            Self::Escaped(_) => "Escaped",
        }
    }

    pub fn time(&self) -> Option<T> {
        match *self {
            Self::Completed => None,
            Self::LeftDomain(t) | Self::StepUnderflow(t) | Self::Escaped(t) => Some(t),
        }
    }

    pub fn is_completed(&self) -> bool {
        matches!(self, Self::Completed)
    }
}

impl<T: Real> fmt::Display for GeodesicStatus<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.time() {
            None => write!(f, "{}", self.label()),
            Some(t) => write!(f, "{}({})", self.label(), t),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GeodesicSample<T> {
    pub t: T,
    pub chart: usize,
    pub position: Vec<T>,
    pub velocity: Vec<T>,
    pub arc_length: T,
    /// Dense-output position at the midpoint of the step ending here, in the
    /// chart used during that step.
    pub mid: Option<(usize, Vec<T>)>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GeodesicTrace<T> {
    pub samples: Vec<GeodesicSample<T>>,
    pub status: GeodesicStatus<T>,
    pub arc_length: T,
    /// Largest `| |γ′|_g − 1 |` at the samples (unit speed at the start).
    pub max_speed_drift: T,
    pub chart_switches: usize,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

impl<T: Real> GeodesicTrace<T> {
    pub fn last(&self) -> &GeodesicSample<T> {
        self.samples.last().expect("trace holds the start sample")
    }

    /// Sample landing exactly on time `t`, if recorded.
    pub fn at(&self, t: T) -> Option<&GeodesicSample<T>> {
        let tol = t.abs().max(T::one()) * lit(1e-12);
        self.samples.iter().find(|s| (s.t - t).abs() <= tol)
    }
}

#[derive(Clone, Debug)]
pub struct GeodesicOptions<T> {
    pub integrator: IntegratorOptions<T>,
    pub record_samples: bool,
    pub record_midpoints: bool,
    /// Times hit exactly and always recorded.
    pub checkpoints: Vec<T>,
}

impl<T: Real> Default for GeodesicOptions<T> {
    fn default() -> Self {
        Self {
            integrator: IntegratorOptions::default().with_tolerances(lit(1e-10), lit(1e-12)),
            record_samples: true,
            record_midpoints: false,
            checkpoints: Vec::new(),
        }
    }
}

struct GeodesicSystem<'a, T: Real, M: Metric<T> + ?Sized> {
    metric: &'a M,
    chart: Cell<usize>,
    failure: RefCell<Option<Error>>,
    marker: std::marker::PhantomData<T>,
}

impl<T: Real, M: Metric<T> + ?Sized> OdeSystem<T> for GeodesicSystem<'_, T, M> {
    fn dim(&self) -> usize {
        2 * self.metric.dim() + 1
    }

    fn rhs(&self, _t: T, y: &[T], dy: &mut [T]) -> Result<(), StepFault> {
        let d = self.metric.dim();
        let (x, rest) = y.split_at(d);
        let v = &rest[..d];
        let chart = self.chart.get();
        if !self.metric.in_domain(chart, x) {
            return Err(StepFault);
        }
        let eval = || -> Result<(Mat<T>, Vec<Mat<T>>)> {
            Ok((self.metric.matrix(chart, x)?, self.metric.derivatives(chart, x)?))
        };
        let (g, dg) = match eval() {
            Ok(p) => p,
            Err(Error::OutOfDomain(_)) | Err(Error::OutOfOverlap { .. }) => return Err(StepFault),
            Err(e) => {
                *self.failure.borrow_mut() = Some(e);
                return Err(StepFault);
            }
        };
        if !(g.spd_margin() > T::zero()) {
            *self.failure.borrow_mut() = Some(Error::DegenerateMetric(to_f64_vec(x)));
            return Err(StepFault);
        }
        let Some(a) = geodesic_acceleration(&g, &dg, v) else {
            *self.failure.borrow_mut() = Some(Error::DegenerateMetric(to_f64_vec(x)));
            return Err(StepFault);
        };
        dy[..d].copy_from_slice(v);
        dy[d..2 * d].copy_from_slice(&a);
        dy[2 * d] = g.bilinear(v, v).max(T::zero()).sqrt();
        Ok(())
    }

    fn escape_norm(&self, y: &[T]) -> T {
        max_abs(&y[..self.metric.dim()])
    }
}

/// Unit-speed geodesic from `(x0, v0)` (velocity normalised internally) for `horizon` time units.
pub fn geodesic<T: Real, M: Metric<T> + ?Sized>(
    metric: &M,
    chart: usize,
    x0: &[T],
    v0: &[T],
    horizon: T,
    opts: &GeodesicOptions<T>,
) -> Result<GeodesicTrace<T>> {
    let d = metric.dim();
    if x0.len() != d || v0.len() != d {
        return Err(Error::InvalidArgument("start point or velocity has wrong dimension".into()));
    }
    if !(horizon > T::zero()) {
        return Err(Error::InvalidArgument("geodesic horizon must be positive".into()));
    }
    if !metric.in_domain(chart, x0) {
        return Err(Error::OutOfDomain(to_f64_vec(x0)));
    }
    let g0 = metric.matrix(chart, x0)?;
    if !(g0.spd_margin() > T::zero()) {
        return Err(Error::DegenerateMetric(to_f64_vec(x0)));
    }
    let speed = g0.bilinear(v0, v0).sqrt();
    if !(speed > T::zero()) {
        return Err(Error::InvalidArgument("start velocity must be nonzero".into()));
    }
    let mut chart = chart;
    let mut x = x0.to_vec();
    let mut v: Vec<T> = v0.iter().map(|&c| c / speed).collect();
    let mut switches = 0;
    if let Some(j) = metric.switch_chart(chart, &x) {
        (x, v) = metric.transfer(chart, j, &x, &v)?;
        chart = j;
        switches += 1;
    }
    let mut y0 = x.clone();
    y0.extend(v.iter().copied());
    y0.push(T::zero());

    let sys = GeodesicSystem {
        metric,
        chart: Cell::new(chart),
        failure: RefCell::new(None),
        marker: std::marker::PhantomData,
    };
    let mut samples = vec![GeodesicSample {
        t: T::zero(),
        chart,
        position: x,
        velocity: v,
        arc_length: T::zero(),
        mid: None,
    }];
    let mut cps: Vec<T> = opts.checkpoints.iter().copied().filter(|&t| t > T::zero() && t < horizon).collect();
    cps.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    cps.dedup();
    let mut drift = T::zero();
    let mut left_at = None;
    let mut internal = None;

    let result = integrate(&sys, T::zero(), &y0, horizon, &cps, &opts.integrator, |step: &StepInfo<'_, T>| {
        let c = sys.chart.get();
        let (xs, rest) = step.y.split_at(d);
        let vs = &rest[..d];
        if let Ok(g) = metric.matrix(c, xs) {
            drift = drift.max((g.bilinear(vs, vs).sqrt() - T::one()).abs());
        }
        let mut state = step.y.to_vec();
        let mut c_new = c;
        let mut replaced = false;
        if let Some(j) = metric.switch_chart(c, xs) {
            match metric.transfer(c, j, xs, vs) {
                Ok((x2, v2)) => {
                    state[..d].copy_from_slice(&x2);
                    state[d..2 * d].copy_from_slice(&v2);
                    c_new = j;
                    replaced = true;
                    switches += 1;
                }
                Err(e) => {
                    internal = Some(e);
                    return Control::Stop;
                }
            }
        } else if !metric.in_domain(c, xs) {
            left_at = Some(step.t);
            return Control::Stop;
        }
        sys.chart.set(c_new);
        if opts.record_samples || step.checkpoint.is_some() || step.t >= horizon {
            samples.push(GeodesicSample {
                t: step.t,
                chart: c_new,
                position: state[..d].to_vec(),
                velocity: state[d..2 * d].to_vec(),
                arc_length: state[2 * d],
                mid: opts.record_midpoints.then(|| (c, step.y_mid[..d].to_vec())),
            });
        }
        if replaced {
            Control::Replace(state)
        } else {
            Control::Continue
        }
    });

    if let Some(e) = internal.or_else(|| sys.failure.borrow_mut().take()) {
        return Err(e);
    }
    let status = match result.termination {
        Termination::Completed => GeodesicStatus::Completed,
        Termination::Escaped(t) => GeodesicStatus::Escaped(t),
        Termination::StepUnderflow(t) | Termination::StepLimit(t) => GeodesicStatus::StepUnderflow(t),
        Termination::Stopped(t) => GeodesicStatus::LeftDomain(left_at.unwrap_or(t)),
        Termination::Faulted(t) => GeodesicStatus::LeftDomain(t),
    };
    if samples.last().map_or(true, |s| s.t < result.t) {
        samples.push(GeodesicSample {
            t: result.t,
            chart: sys.chart.get(),
            position: result.y[..d].to_vec(),
            velocity: result.y[d..2 * d].to_vec(),
            arc_length: result.y[2 * d],
            mid: None,
        });
    }
    let arc = samples.last().map_or(T::zero(), |s| s.arc_length);
    Ok(GeodesicTrace {
        samples,
        status,
        arc_length: arc,
        max_speed_drift: drift,
        chart_switches: switches,
        accepted_steps: result.accepted,
        rejected_steps: result.rejected,
    })
}

/// Base metric of a fibered metric, as a metric on the base coordinates.
#[derive(Clone, Debug)]
pub struct BaseMetricView<'a, T: Real> {
    fm: &'a FiberedMetric<T>,
}

impl<'a, T: Real> BaseMetricView<'a, T> {
    pub fn new(fm: &'a FiberedMetric<T>) -> Self {
        Self { fm }
    }
}

impl<T: Real> Metric<T> for BaseMetricView<'_, T> {
    fn dim(&self) -> usize {
        self.fm.connection().atlas().dim_base()
    }

    fn base_dim(&self) -> usize {
        self.dim()
    }

    fn in_domain(&self, chart: usize, x: &[T]) -> bool {
        chart == 0 && self.fm.connection().atlas().best_chart(x).is_some()
    }

    fn matrix(&self, chart: usize, x: &[T]) -> Result<Mat<T>> {
        if !self.in_domain(chart, x) {
            return Err(Error::OutOfDomain(to_f64_vec(x)));
        }
        Ok(self.fm.base_metric(x))
    }
}

#[derive(Clone, Debug)]
pub struct LiftGeodesicOptions<T> {
    /// Comparison times per unit of curve parameter.
    pub grid: usize,
    pub lift: LiftOptions<T>,
    pub geodesic: GeodesicOptions<T>,
    /// Largest tolerated base-geodesic equation residual.
    pub base_residual_tol: f64,
}

impl<T: Real> Default for LiftGeodesicOptions<T> {
    fn default() -> Self {
        Self {
            grid: 100,
            lift: LiftOptions::default(),
            geodesic: GeodesicOptions::default(),
            base_residual_tol: 1e-5,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LiftGeodesicReport {
    pub base_geodesic_residual: f64,
    /// `sup_t |lift(t) − geodesic(t)|` over the comparison grid.
    pub sup_deviation: f64,
    /// `sup_t |p(lift(t)) − γ(t)|`.
    pub projection_residual: f64,
    pub comparison_points: usize,
    pub lift_status: String,
    pub geodesic_status: String,
}

/// Horizontal lift of the base geodesic `curve`, checked against an
/// independently integrated geodesic of the full metric.
pub fn lift_geodesic<T: Real>(
    fm: &FiberedMetric<T>,
    curve: &BaseCurve<T>,
    start: &BundlePoint<T>,
    opts: &LiftGeodesicOptions<T>,
) -> Result<(LiftTrace<T>, GeodesicTrace<T>, LiftGeodesicReport)> {
    let conn = fm.connection();
    let atlas = conn.atlas();
    let n = atlas.dim_base();
    let span = curve.t1 - curve.t0;

    // γ'' + Γ_B(γ', γ') at interior samples
    let base = BaseMetricView::new(fm);
    let mut base_residual = T::zero();
    for k in 1..20 {
        let t = curve.t0 + span * T::from_usize_lossy(k) / lit(20.0);
        let h = span * lit(1e-4);
        let acc: Vec<T> = curve
            .velocity(t + h)
            .iter()
            .zip(curve.velocity(t - h))
            .map(|(&p, m)| (p - m) / (h + h))
            .collect();
        let x = curve.position(t);
        let g = base.matrix(0, &x)?;
        let a = geodesic_acceleration(&g, &fd_derivatives(&base, 0, &x)?, &curve.velocity(t))
            .ok_or_else(|| Error::DegenerateMetric(to_f64_vec(&x)))?;
        base_residual = base_residual.max(dist(&acc, &a));
    }
    if base_residual.to_f64_lossy() > opts.base_residual_tol {
        return Err(Error::InvalidArgument(format!(
            "base curve is not a geodesic of the base metric (residual {:.3e})",
            base_residual.to_f64_lossy()
        )));
    }

    let steps = (opts.grid as f64 * span.to_f64_lossy()).ceil().max(1.0) as usize;
    let times: Vec<T> = (1..=steps)
        .map(|k| curve.t0 + span * T::from_usize_lossy(k) / T::from_usize_lossy(steps))
        .collect();
    let mut grid_curve = curve.clone();
    grid_curve.breakpoints.extend(times.iter().copied());
    grid_curve
        .breakpoints
        .sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    grid_curve.breakpoints.dedup();
    let lift = horizontal_lift(conn, &grid_curve, start, &opts.lift)?;

    let b0 = curve.position(curve.t0);
    let vb = curve.velocity(curve.t0);
    let speed = fm.base_metric(&b0).bilinear(&vb, &vb).sqrt();
    let gamma = conn.coefficient(start.chart, &b0, &start.fiber)?;
    let mut x0 = b0.clone();
    x0.extend(start.fiber.iter().copied());
    let mut v0 = vb.clone();
    v0.extend(gamma.mul_vec(&vb));
    let mut gopts = opts.geodesic.clone();
    gopts.checkpoints = times.iter().map(|&t| (t - curve.t0) * speed).collect();
    let geo = geodesic(fm, start.chart, &x0, &v0, span * speed, &gopts)?;

    let mut deviation = T::zero();
    let mut projection = T::zero();
    let mut compared = 0;
    for &t in &times {
        let Some(ls) = lift.samples.iter().find(|s| (s.t - t).abs() <= t.abs().max(T::one()) * lit(1e-12)) else {
            continue;
        };
        projection = projection.max(dist(&ls.point.base, &curve.position(t)));
        let Some(gs) = geo.at((t - curve.t0) * speed) else { continue };
        let (gb, gf) = gs.position.split_at(n);
        let gf = if gs.chart == ls.point.chart {
            gf.to_vec()
        } else {
            atlas.transform_fiber(gs.chart, ls.point.chart, gb, gf)?
        };
        let mut a = ls.point.base.clone();
        a.extend(ls.point.fiber.iter().copied());
        let mut b = gb.to_vec();
        b.extend(gf);
        deviation = deviation.max(dist(&a, &b));
        compared += 1;
    }
    let report = LiftGeodesicReport {
        base_geodesic_residual: base_residual.to_f64_lossy(),
        sup_deviation: deviation.to_f64_lossy(),
        projection_residual: projection.to_f64_lossy(),
        comparison_points: compared,
        lift_status: lift.status.label().to_string(),
        geodesic_status: geo.status.label().to_string(),
    };
    Ok((lift, geo, report))
}

#[derive(Clone, Debug)]
pub struct ExpTrivializationOptions<T> {
    /// Grid points per base dimension across `[−radius, radius]`.
    pub per_dim: usize,
    pub fiber_values: Vec<Vec<T>>,
    pub jacobian_step: T,
    /// Smallest accepted `|det|` of the base exponential and of `ψ`.
    pub min_det: T,
    pub geodesic: GeodesicOptions<T>,
}

impl<T: Real> Default for ExpTrivializationOptions<T> {
    fn default() -> Self {
        Self {
            per_dim: 7,
            fiber_values: vec![vec![lit(-1.0)], vec![T::zero()], vec![lit(1.0)]],
            jacobian_step: lit(1e-4),
            min_det: lit(1e-6),
            geodesic: GeodesicOptions {
                record_samples: false,
                ..GeodesicOptions::default()
            },
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ExpTableEntry {
    pub u: Vec<f64>,
    pub fiber: Vec<f64>,
    pub image_chart: usize,
    pub image_base: Vec<f64>,
    pub image_fiber: Vec<f64>,
    pub jacobian_det: f64,
    pub commutation_residual: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExpTrivialization {
    pub chart: usize,
    pub center: Vec<f64>,
    pub radius: f64,
    pub entries: Vec<ExpTableEntry>,
    /// `sup |p(ψ(u, f)) − exp_b(u)|`.
    pub commutation_residual: f64,
    pub min_base_jacobian_det: f64,
    pub min_abs_jacobian_det: f64,
    pub jacobian_sign_consistent: bool,
    /// Spread of `|ψ(u, f) − ψ(u′, f)|` base projections across fiber slices.
    pub slice_isometry_residual: f64,
}

fn endpoint<T: Real, M: Metric<T> + ?Sized>(
    metric: &M,
    chart: usize,
    x: &[T],
    v: &[T],
    opts: &GeodesicOptions<T>,
) -> Result<(usize, Vec<T>)> {
    let g = metric.matrix(chart, x)?;
    let len = g.bilinear(v, v).sqrt();
    if !(len > T::zero()) {
        return Ok((chart, x.to_vec()));
    }
    let tr = geodesic(metric, chart, x, v, len, opts)?;
    if matches!(tr.status, GeodesicStatus::LeftDomain(_)) {
        return Err(Error::OutOfDomain(to_f64_vec(&tr.last().position)));
    }
    if !tr.status.is_completed() {
        return Err(Error::EmbeddingFailure {
            at: to_f64_vec(x),
            det: f64::NAN,
        });
    }
    let s = tr.last();
    Ok((s.chart, s.position.clone()))
}

/// `ψ(u, f) = exp^E((b, f), horizontal lift of u)` on a grid of `|u|_∞ ≤ radius`.
pub fn exp_trivialization<T: Real>(
    fm: &FiberedMetric<T>,
    chart: usize,
    b: &[T],
    radius: T,
    opts: &ExpTrivializationOptions<T>,
) -> Result<ExpTrivialization> {
    let conn = fm.connection();
    let atlas = conn.atlas();
    let n = atlas.dim_base();
    let m = atlas.dim_fiber();
    if b.len() != n || !(radius > T::zero()) {
        return Err(Error::InvalidArgument("bad base point or radius".into()));
    }
    if !atlas.in_outer(chart, b) {
        return Err(Error::OutOfDomain(to_f64_vec(b)));
    }
    let base = BaseMetricView::new(fm);
    let per = opts.per_dim.max(2);
    let us: Vec<Vec<T>> = crate::bundle::BoxDomain {
        lo: vec![-radius; n],
        hi: vec![radius; n],
    }
    .closed_grid(per);
    let h = opts.jacobian_step;

    let base_exp = |u: &[T]| -> Result<Vec<T>> { Ok(endpoint(&base, 0, b, u, &opts.geodesic)?.1) };

    // base exponential must be an embedding on the ball
    let mut min_base_det = T::infinity();
    for u in &us {
        let mut jac = Mat::zeros(n, n);
        for k in 0..n {
            let mut up = u.clone();
            let mut um = u.clone();
            up[k] += h;
            um[k] -= h;
            let (p, q) = (base_exp(&up)?, base_exp(&um)?);
            for r in 0..n {
                jac[(r, k)] = (p[r] - q[r]) / (h + h);
            }
        }
        let det = jac.det();
        min_base_det = min_base_det.min(det);
        if !(det > opts.min_det) {
            return Err(Error::EmbeddingFailure {
                at: to_f64_vec(u),
                det: det.to_f64_lossy(),
            });
        }
    }

    let psi = |u: &[T], f: &[T]| -> Result<(usize, Vec<T>)> {
        let gamma = conn.coefficient(chart, b, f)?;
        let mut x = b.to_vec();
        x.extend(f.iter().copied());
        let mut v = u.to_vec();
        v.extend(gamma.mul_vec(u));
        endpoint(fm, chart, &x, &v, &opts.geodesic)
    };
    let in_chart = |c: usize, x: &[T], target: usize| -> Result<Vec<T>> {
        if c == target {
            return Ok(x.to_vec());
        }
        let mut out = x[..n].to_vec();
        out.extend(atlas.transform_fiber(c, target, &x[..n], &x[n..])?);
        Ok(out)
    };

    let mut entries = Vec::new();
    let mut commutation = T::zero();
    let mut min_abs_det = T::infinity();
    let mut sign: Option<bool> = None;
    let mut consistent = true;
    let mut slice_spread = T::zero();
    for u in &us {
        let eb = base_exp(u)?;
        let mut projections: Vec<Vec<T>> = Vec::new();
        for f in &opts.fiber_values {
            let (c, img) = psi(u, f)?;
            let res = dist(&img[..n], &eb);
            commutation = commutation.max(res);
            projections.push(img[..n].to_vec());

            let mut jac = Mat::zeros(n + m, n + m);
            for k in 0..n + m {
                let (mut up, mut um) = (u.clone(), u.clone());
                let (mut fp, mut fmn) = (f.clone(), f.clone());
                if k < n {
                    up[k] += h;
                    um[k] -= h;
                } else {
                    fp[k - n] += h;
                    fmn[k - n] -= h;
                }
                let (cp, p) = psi(&up, &fp)?;
                let (cm, q) = psi(&um, &fmn)?;
                let p = in_chart(cp, &p, c)?;
                let q = in_chart(cm, &q, c)?;
                for r in 0..n + m {
                    jac[(r, k)] = (p[r] - q[r]) / (h + h);
                }
            }
            let det = jac.det();
            if !(det.abs() > opts.min_det) {
                return Err(Error::EmbeddingFailure {
                    at: to_f64_vec(u),
                    det: det.to_f64_lossy(),
                });
            }
            min_abs_det = min_abs_det.min(det.abs());
            let s = det > T::zero();
            match sign {
                None => sign = Some(s),
                Some(prev) if prev != s => consistent = false,
                _ => {}
            }
            entries.push(ExpTableEntry {
                u: to_f64_vec(u),
                fiber: to_f64_vec(f),
                image_chart: c,
                image_base: to_f64_vec(&img[..n]),
                image_fiber: to_f64_vec(&img[n..]),
                jacobian_det: det.to_f64_lossy(),
                commutation_residual: res.to_f64_lossy(),
            });
        }
        for p in &projections {
            slice_spread = slice_spread.max(dist(p, &projections[0]));
        }
    }
    if !consistent {
        return Err(Error::EmbeddingFailure {
            at: to_f64_vec(b),
            det: 0.0,
        });
    }
    Ok(ExpTrivialization {
        chart,
        center: to_f64_vec(b),
        radius: radius.to_f64_lossy(),
        entries,
        commutation_residual: commutation.to_f64_lossy(),
        min_base_jacobian_det: min_base_det.to_f64_lossy(),
        min_abs_jacobian_det: min_abs_det.to_f64_lossy(),
        jacobian_sign_consistent: consistent,
        slice_isometry_residual: slice_spread.to_f64_lossy(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::{BaseSpace, BoxDomain, BundleAtlas, FiberModel};
    use crate::connection::Connection;
    use crate::riemannian::metric::{FlatMetric, Jet2, SurfaceMetric};
    use std::sync::Arc;

    #[test]
    fn flat_geodesic_is_a_line() {
        let m = FlatMetric::<f64>::new(2, 1, None);
        let tr = geodesic(&m, 0, &[0.0, 0.0], &[1.0, 0.0], 5.0, &GeodesicOptions::default()).unwrap();
        assert!(tr.status.is_completed());
        let end = &tr.last().position;
        assert!((end[0] - 5.0).abs() < 1e-9 && end[1].abs() < 1e-9);
        for s in &tr.samples {
            assert!((s.velocity[0] - 1.0).abs() < 1e-9 && s.velocity[1].abs() < 1e-9);
        }
        assert!((tr.arc_length - 5.0).abs() < 1e-9);
    }

    #[test]
    fn geodesic_leaves_domain() {
        let m = FlatMetric::<f64>::new(1, 1, Some(BoxDomain::interval(-1.0, 1.0).unwrap()));
        let tr = geodesic(&m, 0, &[0.0], &[1.0], 5.0, &GeodesicOptions::default()).unwrap();
        let t = tr.status.time().unwrap();
        assert_eq!(tr.status.label(), "LeftDomain");
        assert!((t - 1.0).abs() < 1e-3);
    }

    #[test]
    fn sphere_great_circle() {
        // dθ² + sin²θ dφ²: the equator is a geodesic and speed stays 1
        let s = SurfaceMetric::new(
            BoxDomain::new(vec![0.1, -100.0], vec![3.0, 100.0]).unwrap(),
            "sphere",
            Arc::new(|t: f64, _p: f64| [1.0, 0.0, t.sin().powi(2)]),
        )
        .unwrap();
        let half_pi = std::f64::consts::FRAC_PI_2;
        let tr = geodesic(&s, 0, &[half_pi, 0.0], &[0.0, 1.0], 10.0, &GeodesicOptions::default()).unwrap();
        let end = &tr.last().position;
        assert!((end[0] - half_pi).abs() < 1e-7);
        assert!((end[1] - 10.0).abs() < 1e-7);
        assert!(tr.max_speed_drift < 1e-6);
        // a tilted great circle returns to the start after 2π
        let tr = geodesic(&s, 0, &[half_pi, 0.0], &[1.0, 1.0], 2.0 * std::f64::consts::PI, &GeodesicOptions::default()).unwrap();
        let end = &tr.last().position;
        assert!((end[0] - half_pi).abs() < 1e-6 && (end[1] - 2.0 * std::f64::consts::PI).abs() < 1e-6);
    }

    fn polyline_length(s: &SurfaceMetric<f64>, pts: &[[f64; 2]]) -> f64 {
        pts.windows(2)
            .map(|w| {
                let mid = [(w[0][0] + w[1][0]) / 2.0, (w[0][1] + w[1][1]) / 2.0];
                let d = [w[1][0] - w[0][0], w[1][1] - w[0][1]];
                s.matrix(0, &mid).unwrap().bilinear(&d, &d).sqrt()
            })
            .sum()
    }

    #[test]
    fn graph_geodesic_matches_discrete_shortest_path() {
        let jet = Arc::new(|x: f64, y: f64| {
            let e = (-(x * x + y * y)).exp();
            Jet2 {
                value: e,
                dx: -2.0 * x * e,
                dy: -2.0 * y * e,
                dxx: (4.0 * x * x - 2.0) * e,
                dxy: 4.0 * x * y * e,
                dyy: (4.0 * y * y - 2.0) * e,
            }
        });
        let s = SurfaceMetric::graph(BoxDomain::new(vec![-3.0, -3.0], vec![3.0, 3.0]).unwrap(), "bump", jet).unwrap();
        let start = [-0.6, -0.2];
        let v = [1.0, 0.25];
        let len = 1.0;
        let tr = geodesic(&s, 0, &start, &v, len, &GeodesicOptions::default()).unwrap();
        let end = tr.last().position.clone();
        // minimise polyline length with fixed endpoints by coordinate descent
        let k = 64;
        let mut pts: Vec<[f64; 2]> = (0..=k)
            .map(|i| {
                let s = i as f64 / k as f64;
                [start[0] + s * (end[0] - start[0]), start[1] + s * (end[1] - start[1])]
            })
            .collect();
        let mut step = 1e-2;
        for _ in 0..60 {
            for i in 1..k {
                for d in 0..2 {
                    for sgn in [1.0, -1.0] {
                        let before = polyline_length(&s, &pts[i - 1..=i + 1]);
                        pts[i][d] += sgn * step;
                        if polyline_length(&s, &pts[i - 1..=i + 1]) >= before {
                            pts[i][d] -= sgn * step;
                        }
                    }
                }
            }
            step *= 0.8;
        }
        let discrete = polyline_length(&s, &pts);
        assert!((discrete - len).abs() < 1e-3, "{discrete} vs {len}");
    }

    fn line_fm(conn: impl Fn(&Arc<BundleAtlas<f64>>) -> Connection<f64>) -> FiberedMetric<f64> {
        let base = BaseSpace::euclidean_box(BoxDomain::interval(-3.0, 3.0).unwrap());
        let atlas = Arc::new(BundleAtlas::product(base, FiberModel::euclidean(1)).unwrap());
        FiberedMetric::with_flat_pieces(conn(&atlas))
    }

    #[test]
    fn product_lift_is_a_geodesic() {
        let fm = line_fm(|a| Connection::zero(a.clone()));
        let curve = BaseCurve::line(vec![-1.0], vec![1.0], 0.0, 1.0).unwrap();
        let (lift, _, rep) =
            lift_geodesic(&fm, &curve, &BundlePoint::new(0, vec![-1.0], vec![0.4]), &LiftGeodesicOptions::default()).unwrap();
        assert!(lift.samples.iter().all(|s| s.point.fiber[0] == 0.4));
        assert!(rep.sup_deviation < 1e-12);
        assert_eq!(rep.projection_residual, 0.0);
    }

    #[test]
    fn curved_connection_lift_is_a_geodesic() {
        let fm = line_fm(|a| {
            Connection::uniform(a.clone(), "twist", |b: &[f64], f: &[f64]| Mat::scalar(0.3 * f[0].sin() + 0.2 * b[0]))
        });
        let curve = BaseCurve::line(vec![-1.0], vec![1.0], 0.0, 1.0).unwrap();
        let (_, _, rep) =
            lift_geodesic(&fm, &curve, &BundlePoint::new(0, vec![-1.0], vec![0.4]), &LiftGeodesicOptions::default()).unwrap();
        assert!(rep.sup_deviation <= 1e-6, "{}", rep.sup_deviation);
        assert!(rep.projection_residual <= 1e-9);
        assert_eq!(rep.comparison_points, 100);
    }

    #[test]
    fn non_geodesic_base_curve_is_rejected() {
        let fm = line_fm(|a| Connection::zero(a.clone()));
        let curve = BaseCurve::new(
            0.0,
            1.0,
            Arc::new(|t: f64| vec![t * t]),
            Arc::new(|t: f64| vec![2.0 * t]),
            2.0,
        )
        .unwrap();
        assert!(lift_geodesic(&fm, &curve, &BundlePoint::new(0, vec![0.0], vec![0.0]), &LiftGeodesicOptions::default()).is_err());
    }

    #[test]
    fn flat_exp_trivialization_is_translation() {
        let fm = line_fm(|a| Connection::zero(a.clone()));
        let tab = exp_trivialization(&fm, 0, &[0.5], 0.5, &ExpTrivializationOptions::default()).unwrap();
        for e in &tab.entries {
            assert!((e.image_base[0] - (0.5 + e.u[0])).abs() < 1e-12);
            assert!((e.image_fiber[0] - e.fiber[0]).abs() < 1e-12);
        }
        assert!(tab.commutation_residual < 1e-12);
        assert!(tab.jacobian_sign_consistent);
    }

    #[test]
    fn twisted_exp_trivialization_commutes() {
        let fm = line_fm(|a| Connection::uniform(a.clone(), "y", |_b: &[f64], f: &[f64]| Mat::scalar(0.5 * f[0])));
        let tab = exp_trivialization(&fm, 0, &[0.0], 0.5, &ExpTrivializationOptions::default()).unwrap();
        assert!(tab.commutation_residual <= 1e-6, "{}", tab.commutation_residual);
        assert!(tab.slice_isometry_residual <= 1e-6);
    }
}
