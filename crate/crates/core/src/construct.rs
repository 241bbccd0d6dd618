//! Complete connections from tubes.
//!
//! Tubes `Tᵢ(n) = φᵢ⁻¹(Uᵢ × h⁻¹(n))` are built round-robin over the charts,
//! each radius exceeding the chart-`i` height of every earlier tube over `Uᵢ`.
//! A partition of unity that vanishes on other charts' tubes blends the
//! chart product connections, so every tube stays horizontal and traps lifts.

use std::sync::Arc;

use serde::Serialize;

use crate::bump::{band_cutoff, interval_bump};
use crate::bundle::{unit_directions, BoxDomain, BundleAtlas};
use crate::connection::{blend, Connection, WeightFamily};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::real::{lit, norm, to_f64_vec, Real};

/// `φᵢ⁻¹(closure(Uᵢ) × h⁻¹([n, n + thickness]))`; thin when `thickness = 0`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Tube<T> {
    pub chart: usize,
    pub radius: usize,
    pub round: usize,
    pub thickness: T,
}

impl<T: Real> Tube<T> {
    pub fn level(&self) -> T {
        T::from_usize_lossy(self.radius)
    }

    pub fn band(&self) -> (T, T) {
        let n = self.level();
        (n, n + self.thickness)
    }

    /// Points of the tube over `b` (chart coordinates), sampled along
    /// `directions` and `band_levels` levels across the band.
    pub fn fiber_points(&self, atlas: &BundleAtlas<T>, directions: &[Vec<T>], band_levels: usize) -> Vec<Vec<T>> {
        let (lo, hi) = self.band();
        let levels = if self.thickness > T::zero() { band_levels.max(2) } else { 1 };
        let mut out = Vec::new();
        for s in 0..levels {
            let level = if levels == 1 {
                lo
            } else {
                lo + (hi - lo) * T::from_usize_lossy(s) / T::from_usize_lossy(levels - 1)
            };
            out.extend(directions.iter().filter_map(|d| atlas.fiber.level_point(level, d)));
        }
        out
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TubeFamily<T> {
    pub tubes: Vec<Tube<T>>,
    pub rounds: usize,
    /// Smallest sampled distance between closures of distinct tubes.
    pub min_separation: T,
    pub separation_samples: usize,
}

impl<T: Real> TubeFamily<T> {
    pub fn radii(&self, chart: usize) -> Vec<usize> {
        self.tubes.iter().filter(|t| t.chart == chart).map(|t| t.radius).collect()
    }

    /// Largest level covered by tubes in every chart.
    pub fn covered_level(&self, charts: usize) -> T {
        (0..charts)
            .map(|c| {
                self.tubes
                    .iter()
                    .filter(|t| t.chart == c)
                    .map(|t| t.level())
                    .fold(T::zero(), T::max)
            })
            .fold(T::infinity(), T::min)
    }

    /// Symmetric fiber-coordinate window `[−w, w]ᵐ` lying below the outermost
    /// tube of every chart (in that chart's coordinates).
    pub fn covered_fiber_window(&self, atlas: &BundleAtlas<T>) -> T {
        let level = self.covered_level(atlas.charts().len());
        let dirs = atlas.fiber.level_directions(64);
        let r = dirs
            .iter()
            .filter_map(|d| atlas.fiber.level_point(level, d))
            .map(|p| norm(&p))
            .fold(T::infinity(), T::min);
        if r.is_finite() {
            r / T::from_usize_lossy(atlas.dim_fiber()).sqrt()
        } else {
            T::zero()
        }
    }
}

#[derive(Clone, Debug)]
pub struct SamplerOptions {
    /// Grid points per continuous parameter.
    pub grid: usize,
    /// Golden-section refinement rounds around the best grid cell.
    pub refine_rounds: usize,
    /// Largest improvement tolerated in the last refinement round.
    pub stability_tol: f64,
    /// Directions sampled on level sets of fibers with `m ≥ 3`.
    pub sphere_directions: usize,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self {
            grid: 64,
            refine_rounds: 3,
            stability_tol: 1e-3,
            sphere_directions: 64,
        }
    }
}

/// Closed-box intersection (may be degenerate).
fn closed_intersection<T: Real>(a: &BoxDomain<T>, b: &BoxDomain<T>) -> Option<BoxDomain<T>> {
    let lo: Vec<T> = a.lo.iter().zip(&b.lo).map(|(&x, &y)| x.max(y)).collect();
    let hi: Vec<T> = a.hi.iter().zip(&b.hi).map(|(&x, &y)| x.min(y)).collect();
    lo.iter().zip(&hi).all(|(l, h)| l <= h).then_some(BoxDomain { lo, hi })
}

/// Max of `h ∘ π₂ ∘ φ_chart` over the closure of `p⁻¹(U_chart) ∩ tube`.
/// `None` when the two do not meet.
fn max_height_over_tube<T: Real>(
    atlas: &BundleAtlas<T>,
    chart: usize,
    tube: &Tube<T>,
    opts: &SamplerOptions,
) -> Result<Option<T>> {
    let ci = atlas.chart(chart)?;
    let ck = atlas.chart(tube.chart)?;
    let Some(region) = closed_intersection(&ci.inner, &ck.inner) else {
        return Ok(None);
    };
    let m = atlas.dim_fiber();
    let n = atlas.dim_base();
    let (lo, hi) = tube.band();
    // continuous parameters: base coordinates, angle (m = 2), band position
    let angle = m == 2;
    let banded = tube.thickness > T::zero();
    let mut p_lo = region.lo.clone();
    let mut p_hi = region.hi.clone();
    if angle {
        p_lo.push(T::zero());
        p_hi.push(T::PI() + T::PI());
    }
    if banded {
        p_lo.push(lo);
        p_hi.push(hi);
    }
    let dirs: Vec<Vec<T>> = match m {
        2 => vec![vec![]],
        _ => unit_directions(m, opts.sphere_directions),
    };

    let eval = |params: &[T], dir: &[T]| -> Result<T> {
        let b = &params[..n];
        let mut idx = n;
        let d: Vec<T> = if angle {
            let a = params[idx];
            idx += 1;
            vec![a.cos(), a.sin()]
        } else {
            dir.to_vec()
        };
        let level = if banded { params[idx] } else { lo };
        let Some(fk) = atlas.fiber.level_point(level, &d) else {
            return Ok(T::neg_infinity());
        };
        let fi = atlas.transform_fiber(tube.chart, chart, b, &fk)?;
        Ok(atlas.fiber.height(&fi))
    };

    let dims = p_lo.len();
    let grid = opts.grid.max(2);
    let per: Vec<usize> = (0..dims).map(|k| if p_hi[k] > p_lo[k] { grid } else { 1 }).collect();
    let coord = |k: usize, i: usize| -> T {
        if per[k] == 1 {
            p_lo[k]
        } else {
            p_lo[k] + (p_hi[k] - p_lo[k]) * T::from_usize_lossy(i) / T::from_usize_lossy(per[k] - 1)
        }
    };
    let total: usize = per.iter().product();

    let mut best = T::neg_infinity();
    let mut best_params = p_lo.clone();
    let mut best_dir = dirs[0].clone();
    for dir in &dirs {
        for mut idx in 0..total {
            let params: Vec<T> = (0..dims)
                .map(|k| {
                    let i = idx % per[k];
                    idx /= per[k];
                    coord(k, i)
                })
                .collect();
            let v = eval(&params, dir)?;
            if v > best {
                best = v;
                best_params = params;
                best_dir = dir.clone();
            }
        }
    }
    if !best.is_finite() {
        return Ok(None);
    }

    // coordinate-wise golden-section refinement within one grid cell
    let inv_phi: T = lit(0.618_033_988_749_894_9);
    let mut last_change = T::zero();
    for _ in 0..opts.refine_rounds {
        let before = best;
        for k in 0..dims {
            if per[k] == 1 {
                continue;
            }
            let cell = (p_hi[k] - p_lo[k]) / T::from_usize_lossy(per[k] - 1);
            let mut a = (best_params[k] - cell).max(p_lo[k]);
            let mut b = (best_params[k] + cell).min(p_hi[k]);
            let mut x = best_params.clone();
            let at = |v: T, x: &mut Vec<T>| -> Result<T> {
                x[k] = v;
                eval(x, &best_dir)
            };
            let mut c = b - (b - a) * inv_phi;
            let mut d = a + (b - a) * inv_phi;
            let mut fc = at(c, &mut x)?;
            let mut fd = at(d, &mut x)?;
            for _ in 0..40 {
                if fc > fd {
                    b = d;
                    d = c;
                    fd = fc;
                    c = b - (b - a) * inv_phi;
                    fc = at(c, &mut x)?;
                } else {
                    a = c;
                    c = d;
                    fc = fd;
                    d = a + (b - a) * inv_phi;
                    fd = at(d, &mut x)?;
                }
            }
            let (cand, fcand) = if fc > fd { (c, fc) } else { (d, fd) };
            if fcand > best {
                best = fcand;
                best_params[k] = cand;
            }
        }
        last_change = best - before;
    }
    if last_change.to_f64_lossy() > opts.stability_tol * best.abs().max(T::one()).to_f64_lossy() {
        return Err(Error::SamplerBudgetExceeded {
            change: last_change.to_f64_lossy(),
        });
    }
    Ok(Some(best))
}

/// Smallest integer above the chart-`chart` height of every existing tube over `U_chart`.
pub fn pick_tube_radius<T: Real>(
    atlas: &BundleAtlas<T>,
    existing: &[Tube<T>],
    chart: usize,
    opts: &SamplerOptions,
) -> Result<usize> {
    atlas.chart(chart)?;
    let mut max = T::zero();
    for tube in existing {
        if let Some(v) = max_height_over_tube(atlas, chart, tube, opts)? {
            max = max.max(v);
        }
    }
    Ok(radius_above(max))
}

/// `floor(M) + 1`. A relative slack of a few ulps absorbs round-off when
/// `M` is an integer attained exactly, e.g. a same-chart tube.
pub fn radius_above<T: Real>(max: T) -> usize {
    let slack = max.abs().max(T::one()) * lit(1e-12);
    (max + slack).floor().to_usize().unwrap_or(usize::MAX - 1) + 1
}

/// `rounds` rounds of round-robin tube creation with thickness chosen per tube.
pub fn build_tube_family_with<T: Real>(
    atlas: &BundleAtlas<T>,
    rounds: usize,
    opts: &SamplerOptions,
    mut thickness: impl FnMut(usize, usize) -> Result<T>,
) -> Result<TubeFamily<T>> {
    if rounds == 0 {
        return Err(Error::InvalidArgument("at least one round of tubes is required".into()));
    }
    let mut tubes: Vec<Tube<T>> = Vec::new();
    for round in 0..rounds {
        for chart in 0..atlas.charts().len() {
            let radius = pick_tube_radius(atlas, &tubes, chart, opts)?;
            if let Some(prev) = tubes.iter().filter(|t| t.chart == chart).map(|t| t.radius).max() {
                if radius <= prev {
                    return Err(Error::InvalidAtlas(format!(
                        "tube radius {radius} on chart {chart} does not exceed {prev}"
                    )));
                }
            }
            let thickness = thickness(chart, radius)?;
            tubes.push(Tube {
                chart,
                radius,
                round,
                thickness,
            });
        }
    }
    let (min_separation, separation_samples) = tube_separation(atlas, &tubes, 10_000)?;
    Ok(TubeFamily {
        tubes,
        rounds,
        min_separation,
        separation_samples,
    })
}

pub fn build_tube_family<T: Real>(atlas: &BundleAtlas<T>, rounds: usize, opts: &SamplerOptions) -> Result<TubeFamily<T>> {
    build_tube_family_with(atlas, rounds, opts, |_, _| Ok(T::zero()))
}

/// Smallest sampled distance (in a common chart's fiber coordinates over the
/// same base point) between points of distinct tube closures.
pub fn tube_separation<T: Real>(atlas: &BundleAtlas<T>, tubes: &[Tube<T>], budget: usize) -> Result<(T, usize)> {
    let pairs: Vec<(usize, usize)> = (0..tubes.len())
        .flat_map(|a| (a + 1..tubes.len()).map(move |b| (a, b)))
        .filter(|&(a, b)| {
            let ua = &atlas.charts()[tubes[a].chart].inner;
            let ub = &atlas.charts()[tubes[b].chart].inner;
            closed_intersection(ua, ub).is_some()
        })
        .collect();
    if pairs.is_empty() {
        return Ok((T::infinity(), 0));
    }
    let dirs = atlas.fiber.level_directions(16);
    let per_pair = (budget / pairs.len()).max(4);
    let points_per_base = dirs.len() * dirs.len();
    let base_n = ((per_pair / points_per_base.max(1)).max(2) as f64)
        .powf(1.0 / atlas.dim_base() as f64)
        .ceil() as usize;
    let mut min = T::infinity();
    let mut count = 0usize;
    for (a, b) in pairs {
        let (ta, tb) = (&tubes[a], &tubes[b]);
        let region = closed_intersection(&atlas.charts()[ta.chart].inner, &atlas.charts()[tb.chart].inner).unwrap();
        let pa = ta.fiber_points(atlas, &dirs, 4);
        let pb = tb.fiber_points(atlas, &dirs, 4);
        for base in region.closed_grid(base_n.max(2)) {
            let mapped: Vec<Vec<T>> = pa
                .iter()
                .map(|f| atlas.transform_fiber(ta.chart, tb.chart, &base, f))
                .collect::<Result<_>>()?;
            for x in &mapped {
                for y in &pb {
                    min = min.min(atlas.fiber_distance(x, y));
                    count += 1;
                }
            }
        }
    }
    Ok((min, count))
}

#[derive(Clone, Debug)]
pub struct PartitionOptions {
    /// Collar width around each tube, in height units.
    pub collar: f64,
    /// Target number of validation samples over the region of interest.
    pub samples: usize,
    /// Times the collar and base decay are halved before giving up.
    pub max_halvings: usize,
}

impl Default for PartitionOptions {
    fn default() -> Self {
        Self {
            collar: 0.25,
            samples: 10_000,
            max_halvings: 12,
        }
    }
}

/// `λᵢ = μᵢ / Σμ` with `μᵢ = β̂ᵢ(b) · Π_{T on charts ≠ i} (1 − χ_T)`.
#[derive(Clone, Debug)]
pub struct PartitionOfUnity<T: Real> {
    atlas: Arc<BundleAtlas<T>>,
    tubes: Vec<Tube<T>>,
    pub collar: T,
    /// Base decay of each chart's bump `β̂ᵢ` (beyond `closure(Uᵢ)`).
    pub base_pad: Vec<T>,
    /// Base decay of each chart's tube cutoff `ρ`.
    pub tube_pad: Vec<T>,
}

impl<T: Real> PartitionOfUnity<T> {
    pub fn new(atlas: Arc<BundleAtlas<T>>, tubes: Vec<Tube<T>>, collar: T, shrink: T) -> Self {
        let base_pad = atlas.charts().iter().map(|c| c.collar() * lit(0.5)).collect();
        let tube_pad = atlas.charts().iter().map(|c| c.collar() * lit(0.25) * shrink).collect();
        Self {
            atlas,
            tubes,
            collar,
            base_pad,
            tube_pad,
        }
    }

    fn box_bump(bx: &BoxDomain<T>, b: &[T], pad: T) -> T {
        (0..b.len()).fold(T::one(), |acc, k| {
            if acc == T::zero() {
                acc
            } else {
                acc * interval_bump(b[k], bx.lo[k], bx.hi[k], pad)
            }
        })
    }

    /// `β̂ᵢ(b)`: 1 on `closure(Uᵢ)`, positive on a neighbourhood inside `Vᵢ`.
    pub fn base_bump(&self, chart: usize, b: &[T]) -> T {
        Self::box_bump(&self.atlas.charts()[chart].inner, b, self.base_pad[chart])
    }

    /// `χ_T` at a point given in chart `chart` coordinates.
    pub fn tube_cutoff(&self, tube: &Tube<T>, chart: usize, b: &[T], f: &[T]) -> Result<T> {
        let k = tube.chart;
        let rho = Self::box_bump(&self.atlas.charts()[k].inner, b, self.tube_pad[k]);
        if rho == T::zero() {
            return Ok(T::zero());
        }
        let fk = self.atlas.transform_fiber(chart, k, b, f)?;
        let (lo, hi) = tube.band();
        Ok(rho * band_cutoff(self.atlas.fiber.height(&fk), lo, hi, self.collar))
    }

    pub fn mu(&self, chart: usize, b: &[T], f: &[T]) -> Result<Vec<T>> {
        let chis: Vec<T> = self
            .tubes
            .iter()
            .map(|t| self.tube_cutoff(t, chart, b, f))
            .collect::<Result<_>>()?;
        Ok((0..self.atlas.charts().len())
            .map(|i| {
                let mut m = self.base_bump(i, b);
                for (t, &chi) in self.tubes.iter().zip(&chis) {
                    if m == T::zero() {
                        break;
                    }
                    if t.chart != i {
                        m *= T::one() - chi;
                    }
                }
                m
            })
            .collect())
    }

    pub fn tubes(&self) -> &[Tube<T>] {
        &self.tubes
    }
}

impl<T: Real> WeightFamily<T> for PartitionOfUnity<T> {
    fn len(&self) -> usize {
        self.atlas.charts().len()
    }

    fn weights(&self, chart: usize, b: &[T], f: &[T]) -> Result<Vec<T>> {
        let mu = self.mu(chart, b, f)?;
        let sum: T = mu.iter().copied().sum();
        if !(sum > lit(1e-12)) {
            return Err(Error::PartitionGap {
                chart,
                base: to_f64_vec(b),
                fiber: to_f64_vec(f),
                sum: sum.to_f64_lossy(),
            });
        }
        Ok(mu.into_iter().map(|m| m / sum).collect())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PartitionDiagnostics {
    pub collar: f64,
    pub halvings: usize,
    pub samples: usize,
    pub min_mu_sum: f64,
    pub max_weight_sum_error: f64,
    /// `max Σ_{j≠i} λⱼ` over sampled points of tubes on chart `i`.
    pub max_off_tube_weight: f64,
    /// `max λᵢ` over sampled points outside `p⁻¹(Vᵢ)`.
    pub max_weight_outside_support: f64,
}

fn validate_partition<T: Real>(pou: &PartitionOfUnity<T>, samples: usize) -> Result<PartitionDiagnostics> {
    let atlas = &pou.atlas;
    let (n, m) = (atlas.dim_base(), atlas.dim_fiber());
    let per = ((samples.max(4) as f64).powf(1.0 / (n + m) as f64)).ceil() as usize;
    let top = pou
        .tubes
        .iter()
        .map(|t| t.band().1)
        .fold(T::one(), T::max)
        + lit(1.0);
    let reach = atlas
        .fiber
        .level_directions(16)
        .iter()
        .filter_map(|d| atlas.fiber.level_point(top, d))
        .map(|p| norm(&p))
        .fold(T::one(), T::max);
    let fibers = atlas.fiber_samples(per, reach);
    let mut min_sum = T::infinity();
    let mut sum_err = T::zero();
    let mut outside = T::zero();
    let mut count = 0usize;
    for b in atlas.base.bounds.interior_grid(per) {
        let Some(c) = atlas.best_chart(&b) else { continue };
        for f in &fibers {
            let mu = pou.mu(c, &b, f)?;
            let s: T = mu.iter().copied().sum();
            count += 1;
            if !(s > lit(1e-12)) {
                return Err(Error::PartitionGap {
                    chart: c,
                    base: to_f64_vec(&b),
                    fiber: to_f64_vec(f),
                    sum: s.to_f64_lossy(),
                });
            }
            min_sum = min_sum.min(s);
            let lambda: Vec<T> = mu.iter().map(|&x| x / s).collect();
            sum_err = sum_err.max((lambda.iter().copied().sum::<T>() - T::one()).abs());
            for (i, &l) in lambda.iter().enumerate() {
                if !atlas.in_outer(i, &b) {
                    outside = outside.max(l);
                }
            }
        }
    }

    let dirs = atlas.fiber.level_directions(16);
    let mut off = T::zero();
    for tube in &pou.tubes {
        let pts = tube.fiber_points(atlas, &dirs, 5);
        for b in atlas.charts()[tube.chart].inner.closed_grid(per) {
            for f in &pts {
                let w = pou.weights(tube.chart, &b, f)?;
                let o: T = w.iter().enumerate().filter(|&(i, _)| i != tube.chart).map(|(_, &x)| x).sum();
                off = off.max(o);
                count += 1;
            }
        }
    }
    Ok(PartitionDiagnostics {
        collar: pou.collar.to_f64_lossy(),
        halvings: 0,
        samples: count,
        min_mu_sum: min_sum.to_f64_lossy(),
        max_weight_sum_error: sum_err.to_f64_lossy(),
        max_off_tube_weight: off.to_f64_lossy(),
        max_weight_outside_support: outside.to_f64_lossy(),
    })
}

/// Partition of unity subordinated to `Wᵢ = p⁻¹(Vᵢ) \ ⋃_{j≠i} closure(Tⱼ)`.
/// The collar and tube decay are halved while validation finds a gap.
pub fn build_partition<T: Real>(
    atlas: Arc<BundleAtlas<T>>,
    tubes: &TubeFamily<T>,
    opts: &PartitionOptions,
) -> Result<(PartitionOfUnity<T>, PartitionDiagnostics)> {
    if !(tubes.min_separation > T::zero()) {
        return Err(Error::InvalidArgument("tube closures are not disjoint".into()));
    }
    let mut collar: T = lit(opts.collar);
    let mut shrink = T::one();
    let mut last_err = None;
    for halvings in 0..=opts.max_halvings {
        let pou = PartitionOfUnity::new(atlas.clone(), tubes.tubes.clone(), collar, shrink);
        match validate_partition(&pou, opts.samples) {
            Ok(mut diag) => {
                diag.halvings = halvings;
                return Ok((pou, diag));
            }
            Err(e @ Error::PartitionGap { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
        collar = collar * lit(0.5);
        shrink = shrink * lit(0.5);
    }
    Err(last_err.expect("loop ran at least once"))
}

#[derive(Clone, Debug)]
pub struct ConstructOptions {
    pub rounds: usize,
    pub sampler: SamplerOptions,
    pub partition: PartitionOptions,
    /// Points sampled per tube for the agreement check.
    pub agreement_samples: usize,
    pub agreement_tol: f64,
}

impl Default for ConstructOptions {
    fn default() -> Self {
        Self {
            rounds: 8,
            sampler: SamplerOptions::default(),
            partition: PartitionOptions::default(),
            agreement_samples: 1000,
            agreement_tol: 1e-9,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TubeRecord {
    pub chart: usize,
    pub radius: usize,
    pub round: usize,
    pub thickness: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AgreementRecord {
    pub tube: usize,
    pub chart: usize,
    pub radius: usize,
    pub samples: usize,
    pub residual: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConstructionRecord {
    pub rounds: usize,
    pub tubes: Vec<TubeRecord>,
    pub min_tube_separation: f64,
    pub separation_samples: usize,
    pub partition: PartitionDiagnostics,
    pub agreement: Vec<AgreementRecord>,
    pub max_agreement_residual: f64,
    /// Start window `[−w, w]ᵐ` below the outermost tube of every chart.
    pub covered_fiber_window: f64,
}

pub(crate) fn tube_records<T: Real>(family: &TubeFamily<T>) -> Vec<TubeRecord> {
    family
        .tubes
        .iter()
        .map(|t| TubeRecord {
            chart: t.chart,
            radius: t.radius,
            round: t.round,
            thickness: t.thickness.to_f64_lossy(),
        })
        .collect()
}

/// Sample points `(chart, b, f)` on a tube: a base grid over `closure(Uᵢ)`
/// times level-set points, about `target` in total.
pub fn tube_sample_points<T: Real>(atlas: &BundleAtlas<T>, tube: &Tube<T>, target: usize) -> Vec<(Vec<T>, Vec<T>)> {
    let dirs = atlas.fiber.level_directions(16);
    let fibers = tube.fiber_points(atlas, &dirs, 5);
    let per_base = (target / fibers.len().max(1)).max(2);
    let per_dim = ((per_base as f64).powf(1.0 / atlas.dim_base() as f64)).ceil() as usize;
    let mut out = Vec::new();
    for b in atlas.charts()[tube.chart].inner.closed_grid(per_dim.max(2)) {
        for f in &fibers {
            out.push((b.clone(), f.clone()));
        }
    }
    out
}

/// Assembles `H = Σ λᵢ Hᵢ` over tubes and checks that `H = Hᵢ` on every `Tᵢ`.
pub fn build_complete_connection<T: Real>(
    atlas: Arc<BundleAtlas<T>>,
    opts: &ConstructOptions,
) -> Result<(Connection<T>, ConstructionRecord)> {
    atlas.check_transitions()?;
    let family = build_tube_family(&atlas, opts.rounds, &opts.sampler)?;
    let (pou, diag) = build_partition(atlas.clone(), &family, &opts.partition)?;
    let parts: Vec<Connection<T>> = (0..atlas.charts().len())
        .map(|i| Connection::chart_induced(atlas.clone(), i))
        .collect::<Result<_>>()?;
    let conn = blend(parts.clone(), Arc::new(pou), 8)?.with_name("complete");

    let mut agreement = Vec::new();
    let mut worst = T::zero();
    for (idx, tube) in family.tubes.iter().enumerate() {
        let pts = tube_sample_points(&atlas, tube, opts.agreement_samples);
        let mut residual = T::zero();
        for (b, f) in &pts {
            // own chart, and every other chart whose outer box also holds b
            for c in 0..atlas.charts().len() {
                if !parts[tube.chart].defined_at(c, b) {
                    continue;
                }
                let fc = atlas.transform_fiber(tube.chart, c, b, f)?;
                let g = conn.coefficient(c, b, &fc)?;
                let gi = parts[tube.chart].coefficient(c, b, &fc)?;
                residual = residual.max(g.sub(&gi).max_abs());
            }
        }
        worst = worst.max(residual);
        agreement.push(AgreementRecord {
            tube: idx,
            chart: tube.chart,
            radius: tube.radius,
            samples: pts.len(),
            residual: residual.to_f64_lossy(),
        });
        if residual.to_f64_lossy() > opts.agreement_tol {
            return Err(Error::AgreementViolation {
                tube: idx,
                residual: residual.to_f64_lossy(),
            });
        }
    }

    let record = ConstructionRecord {
        rounds: family.rounds,
        tubes: tube_records(&family),
        min_tube_separation: family.min_separation.to_f64_lossy(),
        separation_samples: family.separation_samples,
        partition: diag,
        agreement,
        max_agreement_residual: worst.to_f64_lossy(),
        covered_fiber_window: family.covered_fiber_window(&atlas).to_f64_lossy(),
    };
    Ok((conn, record))
}

pub type SectionFn<T> = Arc<dyn Fn(&[T]) -> Vec<T> + Send + Sync>;
pub type SectionDerivFn<T> = Arc<dyn Fn(&[T]) -> Mat<T> + Send + Sync>;

/// Section `σ: U → E` given by its fiber coordinate in `chart`.
#[derive(Clone)]
pub struct Section<T> {
    pub label: i64,
    pub value: SectionFn<T>,
    /// `∂σ/∂b` (m × n).
    pub derivative: SectionDerivFn<T>,
}

#[derive(Clone)]
pub struct SectionFamily<T> {
    pub chart: usize,
    pub domain: BoxDomain<T>,
    pub sections: Vec<Section<T>>,
}

impl<T: Real> SectionFamily<T> {
    /// Constant sections `σ_k(b) = value_k`.
    pub fn constants(chart: usize, domain: BoxDomain<T>, values: &[(i64, T)]) -> Self {
        let n = domain.dim();
        let sections = values
            .iter()
            .map(|&(label, v)| Section {
                label,
                value: Arc::new(move |_b: &[T]| vec![v]) as SectionFn<T>,
                derivative: Arc::new(move |_b: &[T]| Mat::zeros(1, n)) as SectionDerivFn<T>,
            })
            .collect();
        Self { chart, domain, sections }
    }
}

#[derive(Clone, Debug)]
pub struct DisconnectingOptions {
    pub grid: usize,
    pub horizontal_tol: f64,
    /// Probed fiber window `[−window, window]`.
    pub window: f64,
}

impl Default for DisconnectingOptions {
    fn default() -> Self {
        Self {
            grid: 64,
            horizontal_tol: 1e-9,
            window: 10.0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SectionResidual {
    pub label: i64,
    pub residual: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DisconnectingVerdict {
    pub horizontal: bool,
    pub disconnecting: bool,
    pub max_horizontal_residual: f64,
    pub section_residuals: Vec<SectionResidual>,
    pub projection_residual: f64,
    pub min_level: f64,
    pub max_level: f64,
    pub window: f64,
    pub ordered: bool,
    pub grid_points: usize,
    pub note: Option<String>,
}

/// Horizontality of each section and whether the family traps every
/// complementary component inside the probed window (1-dimensional fibers).
pub fn check_disconnecting<T: Real>(
    conn: &Connection<T>,
    family: &SectionFamily<T>,
    opts: &DisconnectingOptions,
) -> DisconnectingVerdict {
    let atlas = conn.atlas();
    let grid = family.domain.interior_grid(opts.grid.max(1));
    let mut residuals = vec![T::zero(); family.sections.len()];
    let mut projection = T::zero();
    let mut evaluated = true;
    let mut min_level = T::infinity();
    let mut max_level = T::neg_infinity();
    let mut ordered = true;
    let mut note = None;
    for b in &grid {
        let mut values = Vec::with_capacity(family.sections.len());
        for (k, s) in family.sections.iter().enumerate() {
            let f = (s.value)(b);
            let point = crate::bundle::BundlePoint::new(family.chart, b.clone(), f.clone());
            projection = projection.max(crate::real::dist(&point.base, b));
            match conn.coefficient(family.chart, b, &f) {
                Ok(g) => {
                    let r = (s.derivative)(b).sub(&g).max_abs();
                    residuals[k] = residuals[k].max(r);
                }
                Err(e) => {
                    evaluated = false;
                    note = Some(e.to_string());
                }
            }
            values.push(f);
        }
        if atlas.dim_fiber() == 1 {
            for w in values.windows(2) {
                if !(w[0][0] < w[1][0]) {
                    ordered = false;
                }
            }
            for v in &values {
                min_level = min_level.min(v[0]);
                max_level = max_level.max(v[0]);
            }
        }
    }
    let max_res = residuals.iter().copied().fold(T::zero(), T::max);
    let horizontal = evaluated && max_res.to_f64_lossy() <= opts.horizontal_tol;
    let window: T = lit(opts.window);
    let disconnecting = if atlas.dim_fiber() != 1 {
        note = Some("disconnecting check requires a one-dimensional fiber".into());
        false
    } else {
        ordered && min_level <= -window && max_level >= window
    };
    DisconnectingVerdict {
        horizontal,
        disconnecting,
        max_horizontal_residual: max_res.to_f64_lossy(),
        section_residuals: family
            .sections
            .iter()
            .zip(&residuals)
            .map(|(s, r)| SectionResidual {
                label: s.label,
                residual: r.to_f64_lossy(),
            })
            .collect(),
        projection_residual: projection.to_f64_lossy(),
        min_level: min_level.to_f64_lossy(),
        max_level: max_level.to_f64_lossy(),
        window: opts.window,
        ordered,
        grid_points: grid.len(),
        note,
    }
}
