use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::geodesic::{geodesic, GeodesicOptions, GeodesicTrace};
use super::metric::{flat_base, BaseMetricFn, FiberMetricFn, FiberedMetric, Metric};
use crate::bundle::{BoxDomain, BundleAtlas};
use crate::connection::{blend, Connection, WeightFamily};
use crate::construct::{
    build_partition, build_tube_family_with, tube_records, tube_sample_points, PartitionDiagnostics,
    PartitionOptions, SamplerOptions, Tube, TubeRecord,
};
use crate::error::{Error, Result};
use crate::lift::{mix_seed, uniform_in, with_pool};
use crate::linalg::Mat;
use crate::real::{lit, norm, to_f64_vec, Real};

/// `φᵢ⁻¹(Uᵢ × h⁻¹(n, n + l))`.
#[derive(Clone, Debug, Serialize)]
pub struct ThickTube {
    pub chart: usize,
    pub band: (f64, f64),
    pub thickness: f64,
    /// Fiber-metric distance between `h⁻¹(−∞, n)` and `h⁻¹(n + l, ∞)`.
    pub separation: f64,
}

#[derive(Clone)]
pub struct MetricConstructOptions<T> {
    pub rounds: usize,
    pub sampler: SamplerOptions,
    pub partition: PartitionOptions,
    pub base_metric: Option<BaseMetricFn<T>>,
    /// Complete metric on the fiber; flat when `None`.
    pub fiber_metric: Option<FiberMetricFn<T>>,
    pub agreement_samples: usize,
    pub agreement_tol: f64,
    /// Largest `l` tried in `{1, 2, 4, …}`.
    pub max_thickness: f64,
}

impl<T: Real> Default for MetricConstructOptions<T> {
    fn default() -> Self {
        Self {
            rounds: 8,
            sampler: SamplerOptions::default(),
            partition: PartitionOptions::default(),
            base_metric: None,
            fiber_metric: None,
            agreement_samples: 1000,
            agreement_tol: 1e-12,
            max_thickness: 1024.0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricConstructionRecord {
    pub rounds: usize,
    pub tubes: Vec<TubeRecord>,
    pub thick_tubes: Vec<ThickTube>,
    pub min_tube_separation: f64,
    pub partition: PartitionDiagnostics,
    /// `sup |G − Gᵢ|` over sampled points of each thick tube.
    pub max_metric_agreement_residual: f64,
    pub horizontal_norm_residual: f64,
    pub covered_fiber_window: f64,
}

/// Gauss–Legendre nodes and weights on `[−1, 1]` (8 points).
const GL_X: [f64; 4] = [0.183_434_642_495_649_8, 0.525_532_409_916_329, 0.796_666_477_413_626_7, 0.960_289_856_497_536_3];
const GL_W: [f64; 4] = [0.362_683_783_378_362, 0.313_706_645_877_887_3, 0.222_381_034_453_374_5, 0.101_228_536_290_376_3];

fn gauss_legendre<T: Real>(f: impl Fn(T) -> T, a: T, b: T, panels: usize) -> T {
    let w = (b - a) / T::from_usize_lossy(panels);
    let mut total = T::zero();
    for p in 0..panels {
        let c = a + w * (T::from_usize_lossy(p) + lit(0.5));
        let h = w * lit(0.5);
        for i in 0..4 {
            let dx = h * lit(GL_X[i]);
            total += (f(c - dx) + f(c + dx)) * h * lit(GL_W[i]);
        }
    }
    total
}

/// Fiber-metric distance across the band `h ∈ [n, n + l]` along each sampled
/// ray (exact for `m = 1`, where the rays are the two half-lines).
pub fn band_separation<T: Real>(atlas: &BundleAtlas<T>, fiber_metric: Option<&FiberMetricFn<T>>, n: T, l: T) -> T {
    let dirs = atlas.fiber.level_directions(32);
    let mut min = T::infinity();
    for d in &dirs {
        let (Some(p), Some(q)) = (atlas.fiber.level_point(n, d), atlas.fiber.level_point(n + l, d)) else {
            continue;
        };
        let (r0, r1) = (norm(&p), norm(&q));
        let dist = match fiber_metric {
            None => r1 - r0,
            Some(g) => gauss_legendre(
                |r: T| {
                    let x: Vec<T> = d.iter().map(|&c| c * r).collect();
                    g(&x).bilinear(d, d).max(T::zero()).sqrt()
                },
                r0,
                r1,
                16,
            ),
        };
        min = min.min(dist);
    }
    min
}

/// Blend of the chart product metrics over thick tubes, assembled as the
/// triple (blended connection, blended vertical metric, base metric).
pub fn build_complete_fibered_metric<T: Real>(
    atlas: Arc<BundleAtlas<T>>,
    opts: &MetricConstructOptions<T>,
) -> Result<(FiberedMetric<T>, MetricConstructionRecord)> {
    atlas.check_transitions()?;
    let fiber_metric = opts.fiber_metric.clone();
    let mut thick = Vec::new();
    let family = build_tube_family_with(&atlas, opts.rounds, &opts.sampler, |chart, radius| {
        let n = T::from_usize_lossy(radius);
        let mut l = T::one();
        loop {
            let sep = band_separation(&atlas, fiber_metric.as_ref(), n, l);
            if sep >= T::one() {
                thick.push(ThickTube {
                    chart,
                    band: (n.to_f64_lossy(), (n + l).to_f64_lossy()),
                    thickness: l.to_f64_lossy(),
                    separation: sep.to_f64_lossy(),
                });
                return Ok(l);
            }
            l = l + l;
            if l.to_f64_lossy() > opts.max_thickness {
                return Err(Error::SeparationViolation {
                    radius,
                    distance: sep.to_f64_lossy(),
                });
            }
        }
    })?;
    let (pou, diag) = build_partition(atlas.clone(), &family, &opts.partition)?;
    let pou = Arc::new(pou);
    let parts: Vec<Connection<T>> = (0..atlas.charts().len())
        .map(|i| Connection::chart_induced(atlas.clone(), i))
        .collect::<Result<_>>()?;
    let conn = blend(parts, pou.clone(), 8)?.with_name("complete-thick");

    let m = atlas.dim_fiber();
    let gf: FiberMetricFn<T> = opts
        .fiber_metric
        .clone()
        .unwrap_or_else(|| Arc::new(move |_f: &[T]| Mat::identity(m)));
    let vertical = {
        let atlas = atlas.clone();
        let pou = pou.clone();
        let gf = gf.clone();
        Arc::new(move |chart: usize, b: &[T], f: &[T]| -> Result<Mat<T>> {
            let w = pou.weights(chart, b, f)?;
            let mut g = Mat::zeros(f.len(), f.len());
            for (i, &wi) in w.iter().enumerate() {
                if wi == T::zero() {
                    continue;
                }
                let gi = chart_vertical(&atlas, &gf, i, chart, b, f)?;
                g.axpy(wi, &gi);
            }
            Ok(g)
        })
    };
    let base = opts.base_metric.clone().unwrap_or_else(|| flat_base(atlas.dim_base()));
    let fm = FiberedMetric::new(conn, vertical, base.clone()).with_name("complete-fibered");

    let mut worst = T::zero();
    for tube in &family.tubes {
        for (b, f) in tube_sample_points(&atlas, tube, opts.agreement_samples) {
            let mut x = b.clone();
            x.extend(f.iter().copied());
            let g = fm.matrix(tube.chart, &x)?;
            let product = FiberedMetric::assemble(&Mat::zeros(m, b.len()), &gf(&f), &base(&b));
            worst = worst.max(g.sub(&product).max_abs());
        }
    }
    if worst.to_f64_lossy() > opts.agreement_tol {
        return Err(Error::AgreementViolation {
            tube: usize::MAX,
            residual: worst.to_f64_lossy(),
        });
    }
    let report = fm.check(9, 9, lit(3.0))?;
    let record = MetricConstructionRecord {
        rounds: family.rounds,
        tubes: tube_records(&family),
        thick_tubes: thick,
        min_tube_separation: family.min_separation.to_f64_lossy(),
        partition: diag,
        max_metric_agreement_residual: worst.to_f64_lossy(),
        horizontal_norm_residual: report.horizontal_norm_residual,
        covered_fiber_window: family.covered_fiber_window(&atlas).to_f64_lossy(),
    };
    Ok((fm, record))
}

/// Chart `i`'s fiber metric pulled back to chart `chart` coordinates.
fn chart_vertical<T: Real>(
    atlas: &BundleAtlas<T>,
    gf: &FiberMetricFn<T>,
    i: usize,
    chart: usize,
    b: &[T],
    f: &[T],
) -> Result<Mat<T>> {
    if i == chart {
        return Ok(gf(f));
    }
    let fi = atlas.transform_fiber(chart, i, b, f)?;
    let (_, j) = atlas.transition_jacobians(chart, i, b, f)?;
    Ok(j.transpose().matmul(&gf(&fi)).matmul(&j))
}

#[derive(Clone, Debug)]
pub struct GeodesicProbeOptions<T> {
    pub trials: usize,
    pub horizon: T,
    pub seed: u64,
    pub base_region: Option<BoxDomain<T>>,
    pub fiber_window: (T, T),
    pub threads: Option<usize>,
    pub geodesic: GeodesicOptions<T>,
}

impl<T: Real> Default for GeodesicProbeOptions<T> {
    fn default() -> Self {
        let mut geodesic = GeodesicOptions::default();
        geodesic.integrator = geodesic.integrator.with_h_max(lit(0.01));
        geodesic.record_midpoints = true;
        Self {
            trials: 100,
            horizon: lit(10.0),
            seed: 0,
            base_region: None,
            fiber_window: (lit(-3.0), lit(3.0)),
            threads: None,
            geodesic,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TubeCrossing {
    pub trial: usize,
    pub tube: usize,
    pub t_enter: f64,
    pub t_exit: f64,
    pub length: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GeodesicProbeOutcome {
    pub trial: usize,
    pub seed: u64,
    pub start_chart: usize,
    pub start: Vec<f64>,
    pub direction: Vec<f64>,
    pub status: String,
    pub t_end: f64,
    pub arc_length: f64,
    pub max_speed_drift: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GeodesicProbeReport {
    pub trials: usize,
    pub horizon: f64,
    pub seed: u64,
    pub completed: usize,
    /// Left the base window; not an escape to infinity.
    pub left_domain: usize,
    pub escaped: usize,
    pub step_underflow: usize,
    pub max_speed_drift: f64,
    pub crossings: usize,
    pub min_crossing_length: Option<f64>,
    pub crossing_records: Vec<TubeCrossing>,
    pub outcomes: Vec<GeodesicProbeOutcome>,
}

/// Point of a trace in chart `target` coordinates, with membership of the base in `closure(U_target)`.
fn tube_height<T: Real>(atlas: &BundleAtlas<T>, chart: usize, x: &[T], target: usize) -> Option<T> {
    let n = atlas.dim_base();
    let (b, f) = x.split_at(n);
    if !atlas.charts()[target].inner.contains_closed(b) {
        return None;
    }
    let ft = atlas.transform_fiber(chart, target, b, f).ok()?;
    Some(atlas.fiber.height(&ft))
}

/// Roots of the quadratic through `(0, h0), (½, hm), (1, h1)` equal to `level` in `[0, 1]`.
fn crossings_on_step<T: Real>(h0: T, hm: T, h1: T, level: T) -> Vec<T> {
    let (a0, am, a1) = (h0 - level, hm - level, h1 - level);
    // q(s) = a0 + c1 s + c2 s²
    let c2 = (a0 - am - am + a1) * lit(2.0);
    let c1 = a1 - a0 - c2;
    let mut roots = Vec::new();
    if c2.abs() <= lit::<T>(1e-14) * (a0.abs() + am.abs() + a1.abs()).max(T::epsilon()) {
        if c1 != T::zero() {
            roots.push(-a0 / c1);
        }
    } else {
        let disc = c1 * c1 - lit::<T>(4.0) * c2 * a0;
        if disc >= T::zero() {
            let sq = disc.sqrt();
            let q = -(c1 + c1.signum() * sq) * lit(0.5);
            if q != T::zero() {
                roots.push(q / c2);
                roots.push(a0 / q);
            } else {
                roots.push(T::zero());
            }
        }
    }
    let mut r: Vec<T> = roots.into_iter().filter(|s| *s >= T::zero() && *s <= T::one()).collect();
    r.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    r
}

/// Arc length spent inside each thick tube on every full crossing (entering
/// through one boundary level and leaving through the other).
pub fn tube_crossings<T: Real>(
    atlas: &BundleAtlas<T>,
    tubes: &[Tube<T>],
    trace: &GeodesicTrace<T>,
    trial: usize,
) -> Vec<TubeCrossing> {
    #[derive(Clone, Copy, PartialEq)]
    enum Side {
        Below,
        Inside,
        Above,
    }
    let mut out = Vec::new();
    for (ti, tube) in tubes.iter().enumerate() {
        let (lo, hi) = tube.band();
        let side_of = |h: T| {
            if h < lo {
                Side::Below
            } else if h > hi {
                Side::Above
            } else {
                Side::Inside
            }
        };
        let mut entered: Option<(T, T, Side)> = None; // (t, s, side entered from)
        let mut prev: Option<(T, T, T)> = None; // (t, s, h)
        for s in &trace.samples {
            let h_end = tube_height(atlas, s.chart, &s.position, tube.chart);
            let h_mid = s.mid.as_ref().and_then(|(c, x)| tube_height(atlas, *c, x, tube.chart));
            let (Some(h1), Some((t0, s0, h0))) = (h_end, prev) else {
                // first sample or off the tube's chart: restart tracking
                entered = None;
                prev = h_end.map(|h| (s.t, s.arc_length, h));
                continue;
            };
            let Some(hm) = h_mid else {
                entered = None;
                prev = Some((s.t, s.arc_length, h1));
                continue;
            };
            let mut events: Vec<(T, T)> = Vec::new(); // (fraction, level)
            for level in [lo, hi] {
                for r in crossings_on_step(h0, hm, h1, level) {
                    events.push((r, level));
                }
            }
            events.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
            let mut side = side_of(h0);
            for (frac, level) in events {
                let t = t0 + (s.t - t0) * frac;
                let arc = s0 + (s.arc_length - s0) * frac;
                let from_below = level == lo;
                match side {
                    Side::Below | Side::Above => {
                        side = Side::Inside;
                        entered = Some((t, arc, if from_below { Side::Below } else { Side::Above }));
                    }
                    Side::Inside => {
                        let exit_side = if from_below { Side::Below } else { Side::Above };
                        if let Some((te, ae, from)) = entered {
                            if from != exit_side {
                                out.push(TubeCrossing {
                                    trial,
                                    tube: ti,
                                    t_enter: te.to_f64_lossy(),
                                    t_exit: t.to_f64_lossy(),
                                    length: (arc - ae).to_f64_lossy(),
                                });
                            }
                        }
                        side = exit_side;
                        entered = None;
                    }
                }
            }
            prev = Some((s.t, s.arc_length, h1));
        }
    }
    out
}

/// Unit-speed geodesics from random starts below the outermost tubes.
pub fn geodesic_probe<T: Real>(
    fm: &FiberedMetric<T>,
    tubes: &[Tube<T>],
    opts: &GeodesicProbeOptions<T>,
) -> Result<GeodesicProbeReport> {
    if opts.trials == 0 {
        return Err(Error::InvalidArgument("probe needs at least one trial".into()));
    }
    let atlas = fm.connection().atlas().clone();
    let region = opts.base_region.clone().unwrap_or_else(|| atlas.base.bounds.clone());
    let d = atlas.dim_base() + atlas.dim_fiber();
    let run = |i: usize| -> Result<(GeodesicProbeOutcome, Vec<TubeCrossing>)> {
        let seed = mix_seed(opts.seed, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<T> = (0..region.dim()).map(|k| uniform_in(&mut rng, region.lo[k], region.hi[k])).collect();
        let chart = atlas.best_chart(&b).ok_or_else(|| Error::NoChartContains(to_f64_vec(&b)))?;
        let f: Vec<T> = (0..atlas.dim_fiber())
            .map(|_| uniform_in(&mut rng, opts.fiber_window.0, opts.fiber_window.1))
            .collect();
        let mut v: Vec<T>;
        loop {
            v = (0..d).map(|_| uniform_in(&mut rng, -T::one(), T::one())).collect();
            let r = norm(&v);
            if r > lit(1e-3) && r <= T::one() {
                break;
            }
        }
        let mut x = b.clone();
        x.extend(f.iter().copied());
        let trace = geodesic(fm, chart, &x, &v, opts.horizon, &opts.geodesic)?;
        let crossings = tube_crossings(&atlas, tubes, &trace, i);
        Ok((
            GeodesicProbeOutcome {
                trial: i,
                seed,
                start_chart: chart,
                start: to_f64_vec(&x),
                direction: to_f64_vec(&v),
                status: trace.status.label().to_string(),
                t_end: trace.last().t.to_f64_lossy(),
                arc_length: trace.arc_length.to_f64_lossy(),
                max_speed_drift: trace.max_speed_drift.to_f64_lossy(),
            },
            crossings,
        ))
    };
    let results: Vec<(GeodesicProbeOutcome, Vec<TubeCrossing>)> =
        with_pool(opts.threads, || (0..opts.trials).into_par_iter().map(run).collect::<Result<Vec<_>>>())?;
    let mut outcomes = Vec::new();
    let mut crossings = Vec::new();
    for (o, c) in results {
        outcomes.push(o);
        crossings.extend(c);
    }
    let count = |label: &str| outcomes.iter().filter(|o| o.status == label).count();
    Ok(GeodesicProbeReport {
        trials: opts.trials,
        horizon: opts.horizon.to_f64_lossy(),
        seed: opts.seed,
        completed: count("Completed"),
        left_domain: count("LeftDomain"),
        escaped: count("Escaped"),
        step_underflow: count("StepUnderflow"),
        max_speed_drift: outcomes.iter().map(|o| o.max_speed_drift).fold(0.0, f64::max),
        crossings: crossings.len(),
        min_crossing_length: crossings.iter().map(|c| c.length).reduce(f64::min),
        crossing_records: crossings,
        outcomes,
    })
}
