//! Horizontal lifts, parallel transport, trivialization by radial transport and
//! randomized completeness probes.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bump::{smoothstep5, smoothstep5_deriv};
use crate::bundle::{BoxDomain, BundleAtlas, BundlePoint, FiberTopology, OVERLAP_MARGIN};
use crate::connection::Connection;
use crate::error::{Error, Result};
use crate::ode::{integrate, Control, IntegratorOptions, OdeSystem, StepFault, StepInfo, Termination};
use crate::real::{dist, lit, max_abs, norm, to_f64_vec, Real};

pub type CurveFn<T> = Arc<dyn Fn(T) -> Vec<T> + Send + Sync>;

/// Smooth base curve `γ: [t₀, t₁] → B` with its velocity.
#[derive(Clone)]
pub struct BaseCurve<T> {
    pub t0: T,
    pub t1: T,
    pos: CurveFn<T>,
    vel: CurveFn<T>,
    /// Declared bound on `|γ′|`.
    pub speed_bound: T,
    /// Joints where the curve is only finitely smooth; integration lands on them.
    pub breakpoints: Vec<T>,
}

impl<T: Real> fmt::Debug for BaseCurve<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BaseCurve")
            .field("t0", &self.t0)
            .field("t1", &self.t1)
            .field("speed_bound", &self.speed_bound)
            .field("breakpoints", &self.breakpoints.len())
            .finish()
    }
}

impl<T: Real> BaseCurve<T> {
    pub fn new(t0: T, t1: T, pos: CurveFn<T>, vel: CurveFn<T>, speed_bound: T) -> Result<Self> {
        if !(t1 > t0) {
            return Err(Error::InvalidArgument("curve domain must satisfy t1 > t0".into()));
        }
        Ok(Self {
            t0,
            t1,
            pos,
            vel,
            speed_bound,
            breakpoints: Vec::new(),
        })
    }

    /// `γ(t) = start + (t − t₀)·velocity`.
    pub fn line(start: Vec<T>, velocity: Vec<T>, t0: T, t1: T) -> Result<Self> {
        let speed = norm(&velocity);
        let v = velocity.clone();
        Self::new(
            t0,
            t1,
            Arc::new(move |t| start.iter().zip(&v).map(|(&a, &w)| a + (t - t0) * w).collect()),
            Arc::new(move |_| velocity.clone()),
            speed,
        )
    }

    /// Straight segment from `a` to `b` traversed over `[0, 1]`.
    pub fn segment(a: &[T], b: &[T]) -> Result<Self> {
        let v: Vec<T> = a.iter().zip(b).map(|(&x, &y)| y - x).collect();
        Self::line(a.to_vec(), v, T::zero(), T::one())
    }

    /// Piecewise-linear path through `waypoints`, each leg timed by a quintic
    /// smoothstep so velocity vanishes at the joints (C² overall). Leg
    /// durations keep the speed at most `speed_bound`.
    pub fn polyline(waypoints: Vec<Vec<T>>, speed_bound: T, min_leg_time: T) -> Result<Self> {
        if waypoints.len() < 2 || !(speed_bound > T::zero()) {
            return Err(Error::InvalidArgument("polyline needs two waypoints and positive speed".into()));
        }
        // peak of the smoothstep derivative
        let peak: T = lit(1.875);
        let mut times = vec![T::zero()];
        for w in waypoints.windows(2) {
            let d = (dist(&w[0], &w[1]) * peak / speed_bound).max(min_leg_time);
            times.push(*times.last().unwrap() + d);
        }
        let t1 = *times.last().unwrap();
        let pts = Arc::new(waypoints);
        let ts = Arc::new(times);
        let leg = {
            let ts = ts.clone();
            move |t: T| -> (usize, T) {
                let k = match ts.iter().rposition(|&s| s <= t) {
                    Some(k) => k.min(ts.len() - 2),
                    None => 0,
                };
                let dur = ts[k + 1] - ts[k];
                (k, ((t - ts[k]) / dur).max(T::zero()).min(T::one()))
            }
        };
        let leg2 = leg.clone();
        let (p1, p2, t1s, t2s) = (pts.clone(), pts, ts.clone(), ts.clone());
        let mut curve = Self::new(
            T::zero(),
            t1,
            Arc::new(move |t| {
                let (k, u) = leg(t);
                let s = smoothstep5(u);
                p1[k].iter().zip(&p1[k + 1]).map(|(&a, &b)| a + (b - a) * s).collect()
            }),
            Arc::new(move |t| {
                let (k, u) = leg2(t);
                let ds = smoothstep5_deriv(u) / (t1s[k + 1] - t1s[k]);
                p2[k].iter().zip(&p2[k + 1]).map(|(&a, &b)| (b - a) * ds).collect()
            }),
            speed_bound,
        )?;
        curve.breakpoints = t2s[1..t2s.len() - 1].to_vec();
        Ok(curve)
    }

    /// `t ↦ γ(t₀ + t₁ − t)`.
    pub fn reversed(&self) -> Self {
        let (t0, t1) = (self.t0, self.t1);
        let (pos, vel) = (self.pos.clone(), self.vel.clone());
        let mut bps: Vec<T> = self.breakpoints.iter().map(|&s| t0 + t1 - s).collect();
        bps.reverse();
        Self {
            t0,
            t1,
            pos: Arc::new(move |t| pos(t0 + t1 - t)),
            vel: Arc::new(move |t| vel(t0 + t1 - t).into_iter().map(|v| -v).collect()),
            speed_bound: self.speed_bound,
            breakpoints: bps,
        }
    }

    /// Restriction to `[t₀, min(t₁, end)]`.
    pub fn truncated(&self, end: T) -> Self {
        let mut c = self.clone();
        c.t1 = self.t1.min(end);
        c.breakpoints.retain(|&s| s < c.t1);
        c
    }

    pub fn position(&self, t: T) -> Vec<T> {
        (self.pos)(t)
    }

    pub fn velocity(&self, t: T) -> Vec<T> {
        (self.vel)(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum LiftStatus<T> {
    Completed,
    BlowUp(T),
    LeftAtlas(T),
    StepUnderflow(T),
}

impl<T: Copy> LiftStatus<T> {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Completed => "Completed",
            Self::BlowUp(_) => "BlowUp",
            Self::LeftAtlas(_) => "LeftAtlas",
            Self::StepUnderflow(_) => "StepUnderflow",
        }
    }

    pub fn time(&self) -> Option<T> {
        match *self {
            Self::Completed => None,
            Self::BlowUp(t) | Self::LeftAtlas(t) | Self::StepUnderflow(t) => Some(t),
        }
    }

    pub fn is_completed(&self) -> bool {
        matches!(self, Self::Completed)
    }
}

impl<T: fmt::Display + Copy> fmt::Display for LiftStatus<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Completed => f.write_str("Completed"),
            Self::BlowUp(t) => write!(f, "BlowUp(t*={t})"),
            Self::LeftAtlas(t) => write!(f, "LeftAtlas(t*={t})"),
            Self::StepUnderflow(t) => write!(f, "StepUnderflow(t*={t})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LiftSample<T> {
    pub t: T,
    pub point: BundlePoint<T>,
    pub height: T,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChartSwitch<T> {
    pub t: T,
    pub from: usize,
    pub to: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct LiftTrace<T> {
    pub samples: Vec<LiftSample<T>>,
    pub status: LiftStatus<T>,
    pub switches: Vec<ChartSwitch<T>>,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    /// Largest `h·|f′ − Γγ′| / (atol + rtol·|f|)` re-evaluated at step midpoints.
    pub max_residual_ratio: T,
}

impl<T: Real> LiftTrace<T> {
    pub fn last(&self) -> &LiftSample<T> {
        self.samples.last().expect("a trace always holds its start sample")
    }

    /// Supremum of the first fiber coordinate over the samples.
    pub fn sup_fiber(&self, k: usize) -> T {
        self.samples
            .iter()
            .fold(T::neg_infinity(), |m, s| m.max(s.point.fiber[k]))
    }
}

#[derive(Clone, Debug)]
pub struct LiftOptions<T> {
    pub integrator: IntegratorOptions<T>,
    /// Hysteresis: switch charts only outside `Uᵢ` shrunk by this fraction of its width.
    pub switch_shrink: T,
    /// Keep every accepted step as a sample (otherwise only the endpoints).
    pub record_samples: bool,
}

impl<T: Real> Default for LiftOptions<T> {
    fn default() -> Self {
        Self {
            integrator: IntegratorOptions::default().with_defect_control(true),
            switch_shrink: lit(0.05),
            record_samples: true,
        }
    }
}

struct LiftSystem<'a, T: Real> {
    conn: &'a Connection<T>,
    curve: &'a BaseCurve<T>,
    chart: Cell<usize>,
    failure: RefCell<Option<Error>>,
}

impl<T: Real> OdeSystem<T> for LiftSystem<'_, T> {
    fn dim(&self) -> usize {
        self.conn.atlas().dim_fiber()
    }

    fn rhs(&self, t: T, y: &[T], dy: &mut [T]) -> Result<(), StepFault> {
        let b = self.curve.position(t);
        let chart = self.chart.get();
        if !self.conn.defined_at(chart, &b) {
            return Err(StepFault);
        }
        let g = match self.conn.coefficient(chart, &b, y) {
            Ok(g) => g,
            Err(e) => {
                if !matches!(e, Error::OutOfOverlap { .. }) {
                    *self.failure.borrow_mut() = Some(e);
                }
                return Err(StepFault);
            }
        };
        let v = self.curve.velocity(t);
        dy.copy_from_slice(&g.mul_vec(&v));
        Ok(())
    }
}

fn shrunk_inner_contains<T: Real>(atlas: &BundleAtlas<T>, chart: usize, b: &[T], shrink: T) -> bool {
    atlas.charts()[chart].inner.shrunk(shrink).contains_open(b, lit(OVERLAP_MARGIN))
}

/// Chart to move to at `b`, or `None` to stay. Switching happens once `b`
/// leaves the shrunk inner box of the current chart and some chart holds `b`
/// deeper.
pub(crate) fn switch_target<T: Real>(atlas: &BundleAtlas<T>, current: usize, b: &[T], shrink: T) -> Option<usize> {
    if shrunk_inner_contains(atlas, current, b, shrink) {
        return None;
    }
    let best = atlas.best_chart(b)?;
    if best == current {
        return None;
    }
    let depth = |c: usize| {
        let ch = &atlas.charts()[c];
        if atlas.in_inner(c, b) {
            ch.inner.relative_margin(b)
        } else {
            // outside Uᵢ: rank below every inner membership
            ch.outer.relative_margin(b) - T::one()
        }
    };
    (depth(best) > depth(current)).then_some(best)
}

/// Integrates `f′ = Γ(γ(t), f)·γ′(t)` from `start` along `curve`.
pub fn horizontal_lift<T: Real>(
    conn: &Connection<T>,
    curve: &BaseCurve<T>,
    start: &BundlePoint<T>,
    opts: &LiftOptions<T>,
) -> Result<LiftTrace<T>> {
    let atlas = conn.atlas().clone();
    let b0 = curve.position(curve.t0);
    if start.base.len() != b0.len() || dist(&start.base, &b0) > lit(1e-9) {
        return Err(Error::StartMismatch {
            start: to_f64_vec(&start.base),
            curve: to_f64_vec(&b0),
        });
    }
    if start.fiber.len() != atlas.dim_fiber() {
        return Err(Error::InvalidArgument("start fiber has wrong dimension".into()));
    }
    let mut chart = start.chart;
    atlas.chart(chart)?;
    let mut fiber = atlas.fiber.wrap(&start.fiber);
    if !atlas.in_outer(chart, &b0) {
        return Err(Error::NoChartContains(to_f64_vec(&b0)));
    }
    let mut switches = Vec::new();
    if let Some(j) = switch_target(&atlas, chart, &b0, opts.switch_shrink) {
        fiber = atlas.transform_fiber(chart, j, &b0, &fiber)?;
        switches.push(ChartSwitch { t: curve.t0, from: chart, to: j });
        chart = j;
    }

    let sys = LiftSystem {
        conn,
        curve,
        chart: Cell::new(chart),
        failure: RefCell::new(None),
    };
    let mut samples = vec![LiftSample {
        t: curve.t0,
        point: BundlePoint::new(chart, b0.clone(), fiber.clone()),
        height: atlas.fiber.height(&fiber),
    }];
    let checkpoints: Vec<T> = curve
        .breakpoints
        .iter()
        .copied()
        .filter(|&s| s > curve.t0 && s < curve.t1)
        .collect();
    let iopts = &opts.integrator;
    let mut worst_ratio = T::zero();
    let mut left_at: Option<T> = None;
    let mut internal_error: Option<Error> = None;
    let circle = matches!(atlas.fiber.topology, FiberTopology::Circle { .. });

    let result = integrate(&sys, curve.t0, &fiber, curve.t1, &checkpoints, iopts, |step: &StepInfo<'_, T>| {
        let c = sys.chart.get();
        let tm = (step.t_prev + step.t) * lit(0.5);
        let bm = curve.position(tm);
        if let Ok(g) = conn.coefficient(c, &bm, step.y_mid) {
            let rhs = g.mul_vec(&curve.velocity(tm));
            for i in 0..rhs.len() {
                let sc = iopts.atol + iopts.rtol * step.y[i].abs().max(step.y_prev[i].abs());
                worst_ratio = worst_ratio.max(step.h * (step.dy_mid[i] - rhs[i]).abs() / sc);
            }
        }

        let b = curve.position(step.t);
        let mut y = if circle { atlas.fiber.wrap(step.y) } else { step.y.to_vec() };
        let mut replaced = circle && y.as_slice() != step.y;
        let mut c_new = c;
        if let Some(j) = switch_target(&atlas, c, &b, opts.switch_shrink) {
            match atlas.transform_fiber(c, j, &b, &y) {
                Ok(fj) => {
                    switches.push(ChartSwitch { t: step.t, from: c, to: j });
                    y = fj;
                    c_new = j;
                    replaced = true;
                }
                Err(e) => {
                    internal_error = Some(e);
                    return Control::Stop;
                }
            }
        } else if !atlas.in_outer(c, &b) {
            left_at = Some(step.t);
            return Control::Stop;
        }
        sys.chart.set(c_new);
        if opts.record_samples || step.t >= curve.t1 {
            samples.push(LiftSample {
                t: step.t,
                point: BundlePoint::new(c_new, b, y.clone()),
                height: atlas.fiber.height(&y),
            });
        }
        if replaced {
            Control::Replace(y)
        } else {
            Control::Continue
        }
    });

    if let Some(e) = internal_error.or_else(|| sys.failure.borrow_mut().take()) {
        return Err(e);
    }
    let status = match result.termination {
        Termination::Completed => LiftStatus::Completed,
        Termination::Escaped(t) => LiftStatus::BlowUp(t),
        Termination::StepUnderflow(t) | Termination::StepLimit(t) => LiftStatus::StepUnderflow(t),
        Termination::Stopped(t) => LiftStatus::LeftAtlas(left_at.unwrap_or(t)),
        Termination::Faulted(t) => {
            // the right-hand side faults only when γ leaves every usable chart
            let ahead = curve.position((t + (curve.t1 - curve.t0) * lit(1e-6)).min(curve.t1));
            if atlas.in_outer(sys.chart.get(), &ahead) {
                LiftStatus::StepUnderflow(t)
            } else {
                LiftStatus::LeftAtlas(t)
            }
        }
    };
    if !opts.record_samples || samples.last().map_or(true, |s| s.t < result.t) {
        let c = sys.chart.get();
        let b = curve.position(result.t);
        if samples.last().map_or(true, |s| s.t < result.t) {
            samples.push(LiftSample {
                t: result.t,
                point: BundlePoint::new(c, b, result.y.clone()),
                height: atlas.fiber.height(&result.y),
            });
        }
    }
    Ok(LiftTrace {
        samples,
        status,
        switches,
        accepted_steps: result.accepted,
        rejected_steps: result.rejected,
        max_residual_ratio: worst_ratio,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct TransportOutcome<T> {
    pub start: BundlePoint<T>,
    pub end: BundlePoint<T>,
    pub status: LiftStatus<T>,
}

/// Endpoints of the horizontal lifts through each fiber point over `γ(t₀)`.
pub fn parallel_transport<T: Real>(
    conn: &Connection<T>,
    curve: &BaseCurve<T>,
    chart: usize,
    fiber_points: &[Vec<T>],
    opts: &LiftOptions<T>,
) -> Result<Vec<TransportOutcome<T>>> {
    let b0 = curve.position(curve.t0);
    let mut quiet = opts.clone();
    quiet.record_samples = false;
    fiber_points
        .par_iter()
        .map(|f| {
            let start = BundlePoint::new(chart, b0.clone(), f.clone());
            let trace = horizontal_lift(conn, curve, &start, &quiet)?;
            Ok(TransportOutcome {
                start,
                end: trace.last().point.clone(),
                status: trace.status,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct TrivializationEntry {
    pub base: Vec<f64>,
    pub fiber: Vec<f64>,
    pub image_chart: usize,
    pub image_base: Vec<f64>,
    pub image_fiber: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TransportTrivialization {
    pub center: Vec<f64>,
    pub radius: f64,
    pub entries: Vec<TrivializationEntry>,
    /// `max |p(φ⁻¹(b, f)) − b|`.
    pub fiber_preservation_residual: f64,
    /// Smallest distance between images of distinct fiber values over the same base point.
    pub min_pairwise_distance: f64,
    pub injective: bool,
}

/// Builds `φ⁻¹(b, f₀)` by transporting `(b₀, f₀)` along the segment `b₀ → b`.
pub fn trivialize_via_transport<T: Real>(
    conn: &Connection<T>,
    center: &[T],
    radius: T,
    base_per_dim: usize,
    fiber_values: &[Vec<T>],
    opts: &LiftOptions<T>,
) -> Result<TransportTrivialization> {
    let atlas = conn.atlas();
    let chart0 = atlas
        .best_chart(center)
        .ok_or_else(|| Error::NoChartContains(to_f64_vec(center)))?;
    let ball = BoxDomain {
        lo: center.iter().map(|&c| c - radius).collect(),
        hi: center.iter().map(|&c| c + radius).collect(),
    };
    let bases: Vec<Vec<T>> = ball
        .closed_grid(base_per_dim)
        .into_iter()
        .filter(|b| dist(b, center) <= radius * (T::one() + lit(1e-12)))
        .collect();
    let mut quiet = opts.clone();
    quiet.record_samples = false;

    let rows: Vec<Result<Vec<BundlePoint<T>>>> = bases
        .par_iter()
        .map(|b| {
            if dist(b, center) == T::zero() {
                return Ok(fiber_values
                    .iter()
                    .map(|f| BundlePoint::new(chart0, b.clone(), f.clone()))
                    .collect());
            }
            let curve = BaseCurve::segment(center, b)?;
            let mut images = Vec::with_capacity(fiber_values.len());
            for f in fiber_values {
                let trace = horizontal_lift(conn, &curve, &BundlePoint::new(chart0, center.to_vec(), f.clone()), &quiet)?;
                if !trace.status.is_completed() {
                    return Err(Error::IncompleteLift {
                        base: to_f64_vec(b),
                        fiber: to_f64_vec(f),
                        status: trace.status.to_string(),
                    });
                }
                images.push(trace.last().point.clone());
            }
            Ok(images)
        })
        .collect();

    let mut entries = Vec::new();
    let mut preservation = T::zero();
    let mut min_pair = T::infinity();
    for (b, row) in bases.iter().zip(rows) {
        let row = row?;
        let reference = row.first().map(|p| p.chart);
        let mut fibers = Vec::with_capacity(row.len());
        for (img, f) in row.iter().zip(fiber_values) {
            preservation = preservation.max(dist(&img.base, b));
            let common = match reference {
                Some(c) if c != img.chart => atlas.transform_fiber(img.chart, c, &img.base, &img.fiber)?,
                _ => img.fiber.clone(),
            };
            fibers.push(common);
            entries.push(TrivializationEntry {
                base: to_f64_vec(b),
                fiber: to_f64_vec(f),
                image_chart: img.chart,
                image_base: to_f64_vec(&img.base),
                image_fiber: to_f64_vec(&img.fiber),
            });
        }
        for i in 0..fibers.len() {
            for j in i + 1..fibers.len() {
                if dist(&fiber_values[i], &fiber_values[j]) > T::zero() {
                    min_pair = min_pair.min(atlas.fiber_distance(&fibers[i], &fibers[j]));
                }
            }
        }
    }
    let min_pair = if min_pair.is_finite() { min_pair.to_f64_lossy() } else { f64::INFINITY };
    Ok(TransportTrivialization {
        center: to_f64_vec(center),
        radius: radius.to_f64_lossy(),
        entries,
        fiber_preservation_residual: preservation.to_f64_lossy(),
        min_pairwise_distance: min_pair,
        injective: min_pair > 0.0,
    })
}

#[derive(Clone, Debug)]
pub struct ProbeOptions<T> {
    pub trials: usize,
    pub horizon: T,
    pub speed_bound: T,
    pub seed: u64,
    /// Region for waypoints; defaults to the atlas's base bounds.
    pub base_region: Option<BoxDomain<T>>,
    /// Start fiber coordinates are drawn uniformly from `[lo, hi]` in every component.
    pub fiber_window: (T, T),
    pub threads: Option<usize>,
    pub lift: LiftOptions<T>,
}

impl<T: Real> Default for ProbeOptions<T> {
    fn default() -> Self {
        Self {
            trials: 100,
            horizon: lit(10.0),
            speed_bound: T::one(),
            seed: 0,
            base_region: None,
            fiber_window: (lit(-3.0), lit(3.0)),
            threads: None,
            lift: LiftOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeOutcome {
    pub trial: usize,
    pub seed: u64,
    pub start_chart: usize,
    pub start_base: Vec<f64>,
    pub start_fiber: Vec<f64>,
    pub status: String,
    pub t_end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeReport {
    pub connection: String,
    pub seed: u64,
    pub trials: usize,
    pub horizon: f64,
    pub speed_bound: f64,
    pub completed: usize,
    pub blow_up: usize,
    pub left_atlas: usize,
    pub step_underflow: usize,
    pub earliest_blow_up: Option<f64>,
    pub outcomes: Vec<ProbeOutcome>,
}

/// SplitMix64 finaliser, used to derive independent per-trial seeds.
pub fn mix_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn uniform_in<T: Real>(rng: &mut ChaCha8Rng, lo: T, hi: T) -> T {
    let u: f64 = rng.gen();
    lo + (hi - lo) * lit(u)
}

/// Random bounded-speed probe curve of duration at least `horizon` inside `region`.
pub fn random_probe_curve<T: Real>(rng: &mut ChaCha8Rng, region: &BoxDomain<T>, horizon: T, speed: T) -> Result<BaseCurve<T>> {
    let draw = |rng: &mut ChaCha8Rng| -> Vec<T> {
        (0..region.dim()).map(|k| uniform_in(rng, region.lo[k], region.hi[k])).collect()
    };
    let min_leg = horizon * lit(1e-3);
    let peak: T = lit(1.875);
    let mut pts = vec![draw(rng)];
    let mut total = T::zero();
    while total < horizon {
        let p = draw(rng);
        total += (dist(pts.last().unwrap(), &p) * peak / speed).max(min_leg);
        pts.push(p);
    }
    Ok(BaseCurve::polyline(pts, speed, min_leg)?.truncated(horizon))
}

pub(crate) fn with_pool<R: Send>(threads: Option<usize>, job: impl FnOnce() -> R + Send) -> R {
    match threads.and_then(|n| rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build().ok()) {
        Some(pool) => pool.install(job),
        None => job(),
    }
}

/// Lifts of randomized bounded-speed curves from randomized starts.
pub fn completeness_probe<T: Real>(conn: &Connection<T>, opts: &ProbeOptions<T>) -> Result<ProbeReport> {
    if opts.trials == 0 {
        return Err(Error::InvalidArgument("probe needs at least one trial".into()));
    }
    let atlas = conn.atlas();
    let region = opts.base_region.clone().unwrap_or_else(|| atlas.base.bounds.clone());
    let mut lift = opts.lift.clone();
    lift.record_samples = false;

    let run = |i: usize| -> Result<ProbeOutcome> {
        let seed = mix_seed(opts.seed, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let curve = random_probe_curve(&mut rng, &region, opts.horizon, opts.speed_bound)?;
        let b0 = curve.position(curve.t0);
        let chart = atlas
            .best_chart(&b0)
            .ok_or_else(|| Error::NoChartContains(to_f64_vec(&b0)))?;
        let f0: Vec<T> = (0..atlas.dim_fiber())
            .map(|_| uniform_in(&mut rng, opts.fiber_window.0, opts.fiber_window.1))
            .collect();
        let start = BundlePoint::new(chart, b0.clone(), f0.clone());
        let trace = horizontal_lift(conn, &curve, &start, &lift)?;
        Ok(ProbeOutcome {
            trial: i,
            seed,
            start_chart: chart,
            start_base: to_f64_vec(&b0),
            start_fiber: to_f64_vec(&f0),
            status: trace.status.label().to_string(),
            t_end: trace.last().t.to_f64_lossy(),
        })
    };
    let outcomes: Vec<ProbeOutcome> =
        with_pool(opts.threads, || (0..opts.trials).into_par_iter().map(run).collect::<Result<Vec<_>>>())?;

    let count = |label: &str| outcomes.iter().filter(|o| o.status == label).count();
    let earliest = outcomes
        .iter()
        .filter(|o| o.status == "BlowUp")
        .map(|o| o.t_end)
        .fold(None, |m: Option<f64>, t| Some(m.map_or(t, |m| m.min(t))));
    Ok(ProbeReport {
        connection: conn.name().to_string(),
        seed: opts.seed,
        trials: opts.trials,
        horizon: opts.horizon.to_f64_lossy(),
        speed_bound: opts.speed_bound.to_f64_lossy(),
        completed: count("Completed"),
        blow_up: count("BlowUp"),
        left_atlas: count("LeftAtlas"),
        step_underflow: count("StepUnderflow"),
        earliest_blow_up: earliest,
        outcomes,
    })
}

/// Largest fiber-coordinate magnitude reached along a trace.
pub fn trace_sup_norm<T: Real>(trace: &LiftTrace<T>) -> T {
    trace.samples.iter().fold(T::zero(), |m, s| m.max(max_abs(&s.point.fiber)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::{shear_pair, BaseSpace, Chart, FiberModel};
    use crate::connection::{blend, ConstantWeights};
    use crate::linalg::Mat;

    fn line_atlas(half: f64) -> Arc<BundleAtlas<f64>> {
        let base = BaseSpace::euclidean_box(BoxDomain::interval(-half, half).unwrap());
        Arc::new(BundleAtlas::product(base, FiberModel::euclidean(1)).unwrap())
    }

    fn example(atlas: &Arc<BundleAtlas<f64>>) -> (Connection<f64>, Connection<f64>, Connection<f64>) {
        let h1 = Connection::uniform(atlas.clone(), "H1", |_b, f| {
            let s = f[0].sin();
            Mat::scalar(2.0 * f[0] * f[0] * s * s)
        });
        let h2 = Connection::uniform(atlas.clone(), "H2", |_b, f| {
            let c = f[0].cos();
            Mat::scalar(2.0 * f[0] * f[0] * c * c)
        });
        let avg = blend(vec![h1.clone(), h2.clone()], Arc::new(ConstantWeights(vec![0.5, 0.5])), 4).unwrap();
        (h1, h2, avg)
    }

    fn lift_line(conn: &Connection<f64>, y0: f64, t1: f64) -> LiftTrace<f64> {
        let curve = BaseCurve::line(vec![0.0], vec![1.0], 0.0, t1).unwrap();
        horizontal_lift(conn, &curve, &BundlePoint::new(0, vec![0.0], vec![y0]), &LiftOptions::default()).unwrap()
    }

    #[test]
    fn averaged_connection_blows_up_at_one_over_y0() {
        let atlas = line_atlas(200.0);
        let (_, _, avg) = example(&atlas);
        let mut last = f64::INFINITY;
        for &y0 in &[0.5, 1.0, 2.0] {
            let trace = lift_line(&avg, y0, 4.0);
            let t = match trace.status {
                LiftStatus::BlowUp(t) => t,
                s => panic!("expected blow-up, got {s}"),
            };
            assert!((t - 1.0 / y0).abs() <= 1e-3 * (1.0 / y0), "y0={y0}: t*={t}");
            assert!(t < last);
            last = t;
        }
    }

    #[test]
    fn equilibrium_lift_is_constant() {
        let atlas = line_atlas(200.0);
        let (h1, _, _) = example(&atlas);
        let pi = std::f64::consts::PI;
        let trace = lift_line(&h1, pi, 100.0);
        assert!(trace.status.is_completed());
        assert!(trace.samples.iter().all(|s| (s.point.fiber[0] - pi).abs() < 1e-9));
    }

    #[test]
    fn h1_lift_is_trapped_below_pi() {
        let atlas = line_atlas(200.0);
        let (h1, _, _) = example(&atlas);
        let trace = lift_line(&h1, std::f64::consts::FRAC_PI_2, 100.0);
        assert!(trace.status.is_completed());
        assert!(trace.sup_fiber(0) < std::f64::consts::PI);
        assert!(trace.samples.windows(2).all(|w| w[1].point.fiber[0] >= w[0].point.fiber[0] - 1e-12));
        assert!(trace.max_residual_ratio <= 10.0, "{}", trace.max_residual_ratio);
    }

    #[test]
    fn zero_connection_keeps_fiber() {
        let atlas = line_atlas(10.0);
        let zero = Connection::zero(atlas);
        let curve = BaseCurve::polyline(vec![vec![0.0], vec![3.0], vec![-4.0]], 1.0, 0.01).unwrap();
        let trace = horizontal_lift(&zero, &curve, &BundlePoint::new(0, vec![0.0], vec![1.5]), &LiftOptions::default()).unwrap();
        assert!(trace.status.is_completed());
        assert!(trace.samples.iter().all(|s| s.point.fiber == vec![1.5]));
        assert!(trace.samples.windows(2).all(|w| w[1].t > w[0].t));
    }

    #[test]
    fn start_mismatch_rejected() {
        let atlas = line_atlas(10.0);
        let zero = Connection::zero(atlas);
        let curve = BaseCurve::line(vec![0.0], vec![1.0], 0.0, 1.0).unwrap();
        let err = horizontal_lift(&zero, &curve, &BundlePoint::new(0, vec![0.5], vec![0.0]), &LiftOptions::default()).unwrap_err();
        assert!(matches!(err, Error::StartMismatch { .. }));
    }

    #[test]
    fn leaving_the_atlas_is_reported() {
        let atlas = line_atlas(1.0);
        let zero = Connection::zero(atlas);
        let curve = BaseCurve::line(vec![0.0], vec![1.0], 0.0, 5.0).unwrap();
        let trace = horizontal_lift(&zero, &curve, &BundlePoint::new(0, vec![0.0], vec![0.0]), &LiftOptions::default()).unwrap();
        match trace.status {
            LiftStatus::LeftAtlas(t) => assert!(t > 1.0 && t < 1.2, "{t}"),
            s => panic!("{s}"),
        }
    }

    #[test]
    fn chart_switch_on_shear_bundle() {
        let base = BaseSpace::euclidean_box(BoxDomain::interval(-2.0, 2.0).unwrap());
        let c0 = Chart::new(0, BoxDomain::interval(-2.0, 0.5).unwrap(), BoxDomain::interval(-3.0, 1.0).unwrap()).unwrap();
        let c1 = Chart::new(1, BoxDomain::interval(-0.5, 2.0).unwrap(), BoxDomain::interval(-1.0, 3.0).unwrap()).unwrap();
        let mut atlas = BundleAtlas::new(base, FiberModel::<f64>::euclidean(1), vec![c0, c1]).unwrap();
        let (a, b) = shear_pair(0, 1, 1.0);
        atlas.add_transition(a).unwrap();
        atlas.add_transition(b).unwrap();
        let atlas = Arc::new(atlas);
        let h0 = Connection::chart_induced(atlas.clone(), 0).unwrap();
        // chart-0 product connection, restricted to where it is defined
        let curve = BaseCurve::line(vec![-1.5], vec![1.0], 0.0, 2.3).unwrap();
        let trace = horizontal_lift(&h0, &curve, &BundlePoint::new(0, vec![-1.5], vec![0.25]), &LiftOptions::default()).unwrap();
        assert_eq!(trace.switches.len(), 1);
        let sw = &trace.switches[0];
        assert_eq!((sw.from, sw.to), (0, 1));
        // in chart 1 the lift is f₁ = 0.25 + b
        let end = trace.last();
        assert!(trace.status.is_completed(), "{}", trace.status);
        assert!((end.point.fiber[0] - (0.25 + end.point.base[0])).abs() < 1e-9);
    }

    #[test]
    fn transport_there_and_back_is_identity() {
        let atlas = line_atlas(200.0);
        let (h1, _, _) = example(&atlas);
        let curve = BaseCurve::polyline(vec![vec![0.0], vec![4.0], vec![1.0]], 1.0, 0.01).unwrap();
        let starts: Vec<Vec<f64>> = (1..6).map(|k| vec![k as f64 * 0.5]).collect();
        let fwd = parallel_transport(&h1, &curve, 0, &starts, &LiftOptions::default()).unwrap();
        let ends: Vec<Vec<f64>> = fwd.iter().map(|o| o.end.fiber.clone()).collect();
        let back = parallel_transport(&h1, &curve.reversed(), 0, &ends, &LiftOptions::default()).unwrap();
        for (s, o) in starts.iter().zip(&back) {
            assert!(o.status.is_completed());
            assert!((o.end.fiber[0] - s[0]).abs() < 1e-6_f64);
        }
    }

    #[test]
    fn transport_of_averaged_connection_blows_up_at_half() {
        let atlas = line_atlas(200.0);
        let (_, _, avg) = example(&atlas);
        let curve = BaseCurve::line(vec![0.0], vec![1.0], 0.0, 1.0).unwrap();
        let out = parallel_transport(&avg, &curve, 0, &[vec![2.0]], &LiftOptions::default()).unwrap();
        match out[0].status {
            LiftStatus::BlowUp(t) => assert!((t - 0.5).abs() < 1e-3),
            s => panic!("{s}"),
        }
    }

    #[test]
    fn trivialization_of_zero_connection_is_identity() {
        let atlas = line_atlas(10.0);
        let zero = Connection::zero(atlas);
        let fibers: Vec<Vec<f64>> = (0..5).map(|k| vec![k as f64]).collect();
        let triv = trivialize_via_transport(&zero, &[0.0], 3.0, 7, &fibers, &LiftOptions::default()).unwrap();
        for e in &triv.entries {
            assert_eq!(e.image_fiber, e.fiber);
            assert!((e.image_base[0] - e.base[0]).abs() < 1e-15);
        }
        assert!(triv.injective);
    }

    #[test]
    fn trivialization_detects_incompleteness() {
        let atlas = line_atlas(200.0);
        let (_, _, avg) = example(&atlas);
        let err = trivialize_via_transport(&avg, &[0.0], 2.0, 5, &[vec![1.0]], &LiftOptions::default()).unwrap_err();
        assert!(matches!(err, Error::IncompleteLift { .. }));
    }

    #[test]
    fn probe_of_zero_connection_completes_and_is_deterministic() {
        let atlas = line_atlas(20.0);
        let zero = Connection::zero(atlas);
        let opts = ProbeOptions { trials: 12, horizon: 5.0, ..ProbeOptions::default() };
        let a = completeness_probe(&zero, &opts).unwrap();
        assert_eq!(a.completed, 12);
        let b = completeness_probe(&zero, &ProbeOptions { threads: Some(1), ..opts }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn probe_curves_respect_speed_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let region = BoxDomain::new(vec![-5.0, -5.0], vec![5.0, 5.0]).unwrap();
        let c = random_probe_curve(&mut rng, &region, 20.0, 1.0).unwrap();
        for i in 0..=2000 {
            let t = c.t1 * i as f64 / 2000.0;
            assert!(norm(&c.velocity(t)) <= 1.0 + 1e-12);
            assert!(region.contains_closed(&c.position(t)));
        }
        assert_eq!(c.t1, 20.0);
    }
}
