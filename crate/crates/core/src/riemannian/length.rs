use std::sync::Arc;

use serde::Serialize;

use super::metric::Metric;
use crate::error::{Error, Result};
use crate::real::{lit, Real};

pub type PathFn<T> = Arc<dyn Fn(T) -> Vec<T> + Send + Sync>;

/// Piecewise-C¹ curve in one chart of a metric.
#[derive(Clone)]
pub struct CurveHandle<T> {
    pub chart: usize,
    pub position: PathFn<T>,
    pub velocity: PathFn<T>,
    /// Points where the curve is only finitely smooth; may accumulate at an endpoint.
    pub breakpoints: Vec<T>,
}

impl<T: Real> CurveHandle<T> {
    pub fn new(chart: usize, position: PathFn<T>, velocity: PathFn<T>) -> Self {
        Self {
            chart,
            position,
            velocity,
            breakpoints: Vec::new(),
        }
    }

    pub fn with_breakpoints(mut self, mut bp: Vec<T>) -> Self {
        bp.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        bp.dedup();
        self.breakpoints = bp;
        self
    }

    /// Straight segment `a + t(b − a)`, `t ∈ [0, 1]`.
    pub fn segment(chart: usize, a: Vec<T>, b: Vec<T>) -> Self {
        let d: Vec<T> = b.iter().zip(&a).map(|(&p, &q)| p - q).collect();
        let d2 = d.clone();
        Self::new(
            chart,
            Arc::new(move |t| a.iter().zip(&d).map(|(&p, &q)| p + t * q).collect()),
            Arc::new(move |_t| d2.clone()),
        )
    }

    /// `t ↦ self(s(t))` with `s′ > 0`.
    pub fn reparametrized(&self, s: PathFn<T>, ds: PathFn<T>) -> Self {
        let (p, v) = (self.position.clone(), self.velocity.clone());
        let s2 = s.clone();
        Self::new(
            self.chart,
            Arc::new(move |t| p(s(t)[0])),
            Arc::new(move |t| {
                let k = ds(t)[0];
                v(s2(t)[0]).into_iter().map(|x| x * k).collect()
            }),
        )
    }
}

#[derive(Clone, Debug)]
pub struct QuadratureOptions {
    /// Cauchy tolerance between successive refinements.
    pub tol: f64,
    /// Absolute tolerance of each adaptive Gauss–Kronrod pass.
    pub panel_tol: f64,
    pub max_refinements: usize,
    /// Panel bisections allowed per refinement level.
    pub max_panels: usize,
    /// Endpoints where the curve is only defined in the limit.
    pub open_start: bool,
    pub open_end: bool,
}

impl Default for QuadratureOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            panel_tol: 1e-11,
            max_refinements: 16,
            max_panels: 200_000,
            open_start: false,
            open_end: false,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LengthReport {
    pub length: f64,
    /// `(refinement level, estimate)`.
    pub refinements: Vec<(usize, f64)>,
    pub converged: bool,
    pub last_change: f64,
    pub evaluations: usize,
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728_0,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// One 15-point Kronrod panel: (estimate, error).
fn gk15<T: Real>(f: &mut impl FnMut(T) -> Result<T>, a: T, b: T) -> Result<(T, T)> {
    let c = (a + b) * lit(0.5);
    let h = (b - a) * lit(0.5);
    let fc = f(c)?;
    let mut k = fc * lit(WGK[7]);
    let mut g = fc * lit(WG[3]);
    for i in 0..7 {
        let dx = h * lit(XGK[i]);
        let s = f(c - dx)? + f(c + dx)?;
        k += s * lit(WGK[i]);
        if i % 2 == 1 {
            g += s * lit(WG[i / 2]);
        }
    }
    Ok((k * h, ((k - g) * h).abs()))
}

/// Panel bisection to an absolute tolerance; errors below round-off of the
/// estimate are accepted, and `budget` caps the number of panels.
fn adaptive<T: Real>(
    f: &mut impl FnMut(T) -> Result<T>,
    a: T,
    b: T,
    tol: T,
    depth: usize,
    budget: &mut usize,
) -> Result<T> {
    let (est, err) = gk15(f, a, b)?;
    let floor = T::epsilon() * lit(50.0) * est.abs();
    if err <= tol.max(floor) || depth == 0 || (b - a).abs() <= T::epsilon() * a.abs().max(T::one()) * lit(16.0) {
        return Ok(est);
    }
    if *budget == 0 {
        return Err(Error::NonConvergent { change: err.to_f64_lossy() });
    }
    *budget -= 1;
    let m = (a + b) * lit(0.5);
    let half = tol * lit(0.5);
    Ok(adaptive(f, a, m, half, depth - 1, budget)? + adaptive(f, m, b, half, depth - 1, budget)?)
}

/// Length of `curve` over `(t0, t1)` under `metric`, with endpoint truncation
/// refined by factors of 4 at open endpoints until successive estimates agree.
pub fn curve_length<T: Real, M: Metric<T> + ?Sized>(
    metric: &M,
    curve: &CurveHandle<T>,
    t0: T,
    t1: T,
    opts: &QuadratureOptions,
) -> Result<LengthReport> {
    if !(t1 > t0) {
        return Err(Error::InvalidArgument("length domain must satisfy t1 > t0".into()));
    }
    let span = t1 - t0;
    let mut evaluations = 0usize;
    let mut speed = |t: T| -> Result<T> {
        evaluations += 1;
        let x = (curve.position)(t);
        let v = (curve.velocity)(t);
        let g = metric.matrix(curve.chart, &x)?;
        Ok(g.bilinear(&v, &v).max(T::zero()).sqrt())
    };
    let open = opts.open_start || opts.open_end;
    let levels = if open { opts.max_refinements.max(2) } else { 2 };
    let mut refinements = Vec::new();
    let mut prev: Option<T> = None;
    let mut last_change = f64::INFINITY;
    for level in 0..levels {
        let cut = span * lit(0.25f64.powi(level as i32 + 2));
        let a = if opts.open_start { t0 + cut } else { t0 };
        let b = if opts.open_end { t1 - cut } else { t1 };
        let mut knots = vec![a];
        knots.extend(curve.breakpoints.iter().copied().filter(|&s| s > a && s < b));
        knots.push(b);
        let mut total = T::zero();
        let mut budget = opts.max_panels;
        for w in knots.windows(2) {
            let tol = lit::<T>(opts.panel_tol) * (w[1] - w[0]) / span;
            total += match adaptive(&mut speed, w[0], w[1], tol, 40, &mut budget) {
                Ok(v) => v,
                // panel budget spent: report the last refinement change
                Err(Error::NonConvergent { .. }) => return Err(Error::NonConvergent { change: last_change }),
                Err(e) => return Err(e),
            };
        }
        refinements.push((level, total.to_f64_lossy()));
        if let Some(p) = prev {
            last_change = (total - p).abs().to_f64_lossy();
            if last_change <= opts.tol {
                return Ok(LengthReport {
                    length: total.to_f64_lossy(),
                    refinements,
                    converged: true,
                    last_change,
                    evaluations,
                });
            }
        }
        prev = Some(total);
    }
    Err(Error::NonConvergent { change: last_change })
}
