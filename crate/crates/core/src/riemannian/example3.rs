//! Graph of a chain of hills over the half-plane `y > 0`, projected to `x`.
//!
//! The induced metric gives a complete connection, yet replacing its
//! horizontal part by the flat metric on the base produces an incomplete
//! metric: the curve `t ↦ (t, c(t))` reaches `x = 0` in finite length.

use std::sync::Arc;

use serde::Serialize;

use super::length::{curve_length, CurveHandle, LengthReport, QuadratureOptions};
use super::metric::{Jet2, SurfaceMetric};
use crate::bump::{smoothstep5, smoothstep5_deriv};
use crate::bundle::{BaseSpace, BoxDomain, BundleAtlas, FiberModel};
use crate::connection::Connection;
use crate::construct::SectionFamily;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::real::{lit, Real};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Example3Params {
    /// Hills `φ_k` are summed for `0 ≤ k ≤ k_max`.
    pub k_max: usize,
    /// Additive constant in `b`; moves the hill ridges across the section levels.
    pub hill_offset: f64,
}

impl Default for Example3Params {
    fn default() -> Self {
        Self {
            k_max: 12,
            hill_offset: -8.0,
        }
    }
}

/// Plateaus of `c` are resolved down to `x = −5·2^{−PLATEAU_LEVELS}`.
const PLATEAU_LEVELS: i32 = 60;

/// `a(u) = exp(1 − 1/(1 − u²))` on `|u| < 1`, and its first two derivatives.
pub fn hill_profile<T: Real>(u: T) -> (T, T, T) {
    if u.abs() >= T::one() {
        return (T::zero(), T::zero(), T::zero());
    }
    let w = T::one() - u * u;
    let a = (T::one() - T::one() / w).exp();
    let two: T = lit(2.0);
    let q = two * u / (w * w);
    let da = -a * q;
    let dq = two / (w * w) + lit::<T>(8.0) * u * u / (w * w * w);
    (a, da, a * (q * q - dq))
}

/// `b(s) = s³/(1 − s²) + offset` and its first two derivatives on `|s| < 1`.
pub fn ridge_profile<T: Real>(s: T, offset: T) -> (T, T, T) {
    let w = T::one() - s * s;
    let b = s * s * s / w + offset;
    let db = (lit::<T>(3.0) * s * s - s * s * s * s) / (w * w);
    let ddb = (lit::<T>(6.0) * s + lit::<T>(2.0) * s * s * s) / (w * w * w);
    (b, db, ddb)
}

#[derive(Clone)]
pub struct Example3<T: Real> {
    pub params: Example3Params,
    pub induced: SurfaceMetric<T>,
    pub w_recipe: SurfaceMetric<T>,
    pub c_curve: CurveHandle<T>,
}

impl<T: Real> std::fmt::Debug for Example3<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Example3").field("params", &self.params).finish()
    }
}

/// `φ₀` at `(X, Y)`.
fn base_hill<T: Real>(x: T, y: T, offset: T) -> Jet2<T> {
    let (three, five, four): (T, T, T) = (lit(3.0), lit(5.0), lit(4.0));
    if !(y > three && y < five) {
        return Jet2::default();
    }
    let s = y - four;
    let (b, db, ddb) = ridge_profile(s, offset);
    let u = x - b - four;
    if !(u.abs() < T::one()) {
        return Jet2::default();
    }
    let (a, da, dda) = hill_profile(u);
    Jet2 {
        value: a,
        dx: da,
        dy: -da * db,
        dxx: dda,
        dxy: -dda * db,
        dyy: dda * db * db - da * ddb,
    }
}

/// `φ_k(x, y) = φ₀(2ᵏx, 2ᵏy)`.
pub fn hill_jet<T: Real>(k: usize, x: T, y: T, offset: T) -> Jet2<T> {
    let s: T = lit(2f64.powi(k as i32));
    let j = base_hill(s * x, s * y, offset);
    let s2 = s * s;
    Jet2 {
        value: j.value,
        dx: j.dx * s,
        dy: j.dy * s,
        dxx: j.dxx * s2,
        dxy: j.dxy * s2,
        dyy: j.dyy * s2,
    }
}

/// `φ = Σ_{k ≤ k_max} φ_k`; at most one term is nonzero at any point.
pub fn phi_jet<T: Real>(k_max: usize, x: T, y: T, offset: T) -> Jet2<T> {
    for k in 0..=k_max {
        let s: T = lit(2f64.powi(k as i32));
        let ys = s * y;
        if ys > lit(3.0) && ys < lit(5.0) {
            return hill_jet(k, x, y, offset);
        }
    }
    Jet2::default()
}

/// Plateau level `c(x) = 4/2ᵏ` on `[−5/2ᵏ, −3/2ᵏ]`, joined by quintic ramps.
pub fn c_profile<T: Real>(x: T) -> (T, T) {
    let ax = -x;
    let mut k = 0i32;
    let mut scale = T::one();
    // find k with 5/2^{k+1} < |x| ≤ 5/2^k
    while k < PLATEAU_LEVELS && ax <= lit::<T>(2.5) * scale {
        k += 1;
        scale = scale * lit(0.5);
    }
    let level = lit::<T>(4.0) * scale;
    if ax >= lit::<T>(3.0) * scale {
        return (level, T::zero());
    }
    let width = lit::<T>(0.5) * scale;
    let u = (x + lit::<T>(3.0) * scale) / width;
    let drop = lit::<T>(2.0) * scale;
    (level - drop * smoothstep5(u), -drop * smoothstep5_deriv(u) / width)
}

pub fn make_example3<T: Real>(params: Example3Params) -> Result<Example3<T>> {
    if params.k_max < 1 {
        return Err(Error::InvalidArgument("k_max must be at least 1".into()));
    }
    let domain = BoxDomain::new(vec![lit(-100.0), T::zero()], vec![lit(100.0), lit(100.0)])?;
    let k_max = params.k_max;
    let offset: T = lit(params.hill_offset);
    let jet = Arc::new(move |x: T, y: T| phi_jet(k_max, x, y, offset));
    let induced = SurfaceMetric::graph(domain.clone(), "induced", jet.clone())?;

    let j1 = jet.clone();
    let comps = Arc::new(move |x: T, y: T| {
        let p = j1(x, y);
        let (g12, g22) = (p.dx * p.dy, T::one() + p.dy * p.dy);
        [T::one() + g12 * g12 / g22, g12, g22]
    });
    let derivs = Arc::new(move |x: T, y: T| {
        let p = jet(x, y);
        let two: T = lit(2.0);
        let (g12, g22) = (p.dx * p.dy, T::one() + p.dy * p.dy);
        let d12 = [p.dxx * p.dy + p.dx * p.dxy, p.dxy * p.dy + p.dx * p.dyy];
        let d22 = [two * p.dy * p.dxy, two * p.dy * p.dyy];
        let d11 = |i: usize| two * g12 * d12[i] / g22 - g12 * g12 * d22[i] / (g22 * g22);
        [[d11(0), d12[0], d22[0]], [d11(1), d12[1], d22[1]]]
    });
    let w_recipe = SurfaceMetric::new(domain, "w-recipe", comps)?.with_derivatives(derivs);

    let mut breakpoints = Vec::new();
    for k in 0..=PLATEAU_LEVELS {
        let s = 2f64.powi(-k);
        breakpoints.push(lit(-3.0 * s));
        if k > 0 {
            breakpoints.push(lit(-5.0 * s));
        }
    }
    let c_curve = CurveHandle::new(
        0,
        Arc::new(|t: T| vec![t, c_profile(t).0]),
        Arc::new(|t: T| vec![T::one(), c_profile(t).1]),
    )
    .with_breakpoints(breakpoints);
    Ok(Example3 {
        params,
        induced,
        w_recipe,
        c_curve,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct Example3Diagnostics {
    pub k_max: usize,
    /// `max_k max_x |slope(x, 4/2ᵏ)|` for `k ≤ k_check`.
    pub section_horizontality_residual: f64,
    pub k_check: usize,
    pub slope_preservation_residual: f64,
    pub max_support_overlap: f64,
    pub peak_height: f64,
    pub peak_location: f64,
}

impl<T: Real> Example3<T> {
    fn offset(&self) -> T {
        lit(self.params.hill_offset)
    }

    pub fn phi(&self, x: T, y: T) -> T {
        phi_jet(self.params.k_max, x, y, self.offset()).value
    }

    /// Level `y = 4/2ᵏ` of the horizontal section `σ_k`.
    pub fn section_level(k: i64) -> T {
        lit(4.0 * 2f64.powi(-(k as i32)))
    }

    /// `max |−g₁₂/g₂₂|` along `y = 4/2ᵏ` for `x ∈ [−6, 6]`.
    pub fn section_residual(&self, k: i64, samples: usize) -> T {
        let y = Self::section_level(k);
        (0..=samples)
            .map(|i| {
                let x = lit::<T>(-6.0) + lit::<T>(12.0) * T::from_usize_lossy(i) / T::from_usize_lossy(samples);
                self.induced.horizontal_slope(x, y).abs()
            })
            .fold(T::zero(), T::max)
    }

    /// `max |slope_W − slope_induced|` over a grid of the hill region.
    pub fn slope_preservation_residual(&self, per_dim: usize) -> T {
        let region = BoxDomain {
            lo: vec![lit(-6.0), lit(1e-3)],
            hi: vec![lit(6.0), lit(5.5)],
        };
        region
            .interior_grid(per_dim)
            .iter()
            .map(|p| (self.w_recipe.horizontal_slope(p[0], p[1]) - self.induced.horizontal_slope(p[0], p[1])).abs())
            .fold(T::zero(), T::max)
    }

    /// `max |φ_j φ_k|` over `j ≠ k` on a grid.
    pub fn support_overlap(&self, per_dim: usize) -> T {
        let region = BoxDomain {
            lo: vec![lit(-12.0), lit(1e-3)],
            hi: vec![lit(12.0), lit(5.5)],
        };
        let mut worst = T::zero();
        for p in region.interior_grid(per_dim) {
            let vals: Vec<T> = (0..=self.params.k_max)
                .map(|k| hill_jet(k, p[0], p[1], self.offset()).value)
                .collect();
            for j in 0..vals.len() {
                for k in j + 1..vals.len() {
                    worst = worst.max((vals[j] * vals[k]).abs());
                }
            }
        }
        worst
    }

    pub fn diagnostics(&self, k_check: usize) -> Example3Diagnostics {
        let sec = (0..=k_check as i64)
            .map(|k| self.section_residual(k, 2000))
            .fold(T::zero(), T::max);
        // ridge of φ₀ on y = 4 sits at x = b(0) + 4
        let mut peak = (T::zero(), T::zero());
        for i in 0..=4000 {
            let x = lit::<T>(-10.0) + lit::<T>(20.0) * T::from_usize_lossy(i) / lit(4000.0);
            let v = self.phi(x, lit(4.0));
            if v > peak.0 {
                peak = (v, x);
            }
        }
        Example3Diagnostics {
            k_max: self.params.k_max,
            section_horizontality_residual: sec.to_f64_lossy(),
            k_check,
            slope_preservation_residual: self.slope_preservation_residual(120).to_f64_lossy(),
            max_support_overlap: self.support_overlap(160).to_f64_lossy(),
            peak_height: peak.0.to_f64_lossy(),
            peak_location: peak.1.to_f64_lossy(),
        }
    }

    /// Length of `t ↦ (t, c(t))`, `t ∈ (−5, 0)`, under the W-recipe metric.
    pub fn w_length(&self, tol: f64) -> Result<LengthReport> {
        let opts = QuadratureOptions {
            tol,
            panel_tol: tol * 1e-4,
            max_refinements: 24,
            open_end: true,
            ..Default::default()
        };
        curve_length(&self.w_recipe, &self.c_curve, lit(-5.0), T::zero(), &opts)
    }

    /// Same curve under the induced metric.
    pub fn induced_length(&self, tol: f64) -> Result<LengthReport> {
        let opts = QuadratureOptions {
            tol,
            panel_tol: tol * 1e-4,
            max_refinements: 24,
            open_end: true,
            ..Default::default()
        };
        curve_length(&self.induced, &self.c_curve, lit(-5.0), T::zero(), &opts)
    }

    /// Bundle over `x ∈ [−half_width, half_width]` with fiber coordinate `u = ln y`.
    pub fn log_atlas(half_width: T) -> Result<Arc<BundleAtlas<T>>> {
        let base = BaseSpace::euclidean_box(BoxDomain::interval(-half_width, half_width)?);
        Ok(Arc::new(BundleAtlas::product(base, FiberModel::euclidean(1))?))
    }

    /// Induced connection in `(x, u = ln y)` coordinates: `du/dx = slope/y`.
    pub fn induced_connection(&self, atlas: Arc<BundleAtlas<T>>) -> Connection<T> {
        let metric = self.induced.clone();
        Connection::uniform(atlas, "induced", move |b: &[T], f: &[T]| {
            let y = f[0].exp();
            Mat::scalar(metric.horizontal_slope(b[0], y) / y)
        })
    }

    /// `σ_k` for `|k| ≤ k_range`, as constant sections `u = ln(4/2ᵏ)`.
    pub fn section_family(&self, domain: BoxDomain<T>, k_range: i64) -> SectionFamily<T> {
        let values: Vec<(i64, T)> = (-k_range..=k_range)
            .rev()
            .map(|k| (k, Self::section_level(k).ln()))
            .collect();
        SectionFamily::constants(0, domain, &values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::construct::{check_disconnecting, DisconnectingOptions};
    use crate::riemannian::metric::{christoffel, christoffel_from, fd_derivatives, Metric};

    #[test]
    fn profiles_meet_their_constraints() {
        let (a0, da0, _) = hill_profile(0.0_f64);
        assert_eq!((a0, da0), (1.0, 0.0));
        assert_eq!(hill_profile(1.0_f64).0, 0.0);
        assert_eq!(hill_profile(-1.5_f64).0, 0.0);
        let (_, db0, _) = ridge_profile(0.0_f64, 0.0);
        assert_eq!(db0, 0.0);
        // increasing, diverging at ±1
        let mut prev = f64::NEG_INFINITY;
        for i in 1..200 {
            let s = -1.0 + i as f64 / 100.0;
            let (b, db, _) = ridge_profile(s, 0.0);
            assert!(b > prev && db >= 0.0);
            prev = b;
        }
        assert!(ridge_profile(0.999_999_f64, 0.0).0 > 1e5);
        // derivatives against central differences
        for &u in &[-0.7_f64, -0.2, 0.1, 0.55] {
            let h = 1e-6_f64;
            let (_, da, dda) = hill_profile(u);
            assert!((da - (hill_profile(u + h).0 - hill_profile(u - h).0) / (2.0 * h)).abs() < 1e-6);
            assert!((dda - (hill_profile(u + h).1 - hill_profile(u - h).1) / (2.0 * h)).abs() < 1e-5);
            let (_, db, ddb) = ridge_profile(u, -8.0);
            assert!((db - (ridge_profile(u + h, -8.0).0 - ridge_profile(u - h, -8.0).0) / (2.0 * h)).abs() < 1e-6);
            assert!((ddb - (ridge_profile(u + h, -8.0).1 - ridge_profile(u - h, -8.0).1) / (2.0 * h)).abs() < 1e-5);
        }
    }

    #[test]
    fn c_has_the_required_plateaus_and_decreases() {
        for k in 0..20 {
            let s = 2f64.powi(-k);
            for frac in [0.0, 0.3, 1.0] {
                let x = -5.0 * s + 2.0 * s * frac;
                assert!((c_profile(x).0 - 4.0 * s).abs() < 1e-15 * s.max(1e-300) + 1e-300);
            }
        }
        let mut prev = f64::INFINITY;
        for i in 0..5000 {
            let x = -5.0 + 5.0 * i as f64 / 5000.0;
            let (c, dc) = c_profile(x);
            assert!(c <= prev && dc <= 0.0);
            prev = c;
        }
    }

    #[test]
    fn hills_have_height_one_on_the_ridge() {
        let ex = make_example3::<f64>(Example3Params::default()).unwrap();
        let d = ex.diagnostics(8);
        assert!((d.peak_height - 1.0).abs() < 1e-12);
        // ridge at b(0) + 4 = offset + 4
        assert!((d.peak_location - (-4.0)).abs() < 1e-2);
        assert_eq!(ex.phi(-4.0, 4.0), 1.0);
        assert_eq!(d.max_support_overlap, 0.0);
        assert!(d.section_horizontality_residual <= 1e-9);
        assert!(d.slope_preservation_residual <= 1e-9);
    }

    #[test]
    fn analytic_christoffel_symbols_match_differences() {
        let ex = make_example3::<f64>(Example3Params::default()).unwrap();
        for m in [&ex.induced, &ex.w_recipe] {
            for &(x, y) in &[(-4.1, 3.9), (-3.7, 4.3), (-2.05, 2.1), (-1.02, 0.98)] {
                let an = christoffel(m, 0, &[x, y]).unwrap();
                let g = m.matrix(0, &[x, y]).unwrap();
                let fd = christoffel_from(&g, &fd_derivatives(m, 0, &[x, y]).unwrap()).unwrap();
                for k in 0..2 {
                    let scale = an[k].max_abs().max(1.0);
                    assert!(an[k].sub(&fd[k]).max_abs() <= 1e-5 * scale, "{x} {y}");
                }
            }
        }
    }

    #[test]
    fn sections_are_horizontal_and_disconnecting_in_log_coordinates() {
        let ex = make_example3::<f64>(Example3Params::default()).unwrap();
        let atlas = Example3::log_atlas(6.0).unwrap();
        let conn = ex.induced_connection(atlas);
        let fam = ex.section_family(BoxDomain::interval(-6.0, 6.0).unwrap(), 8);
        let v = check_disconnecting(&conn, &fam, &DisconnectingOptions { window: 4.0, ..Default::default() });
        assert!(v.horizontal && v.disconnecting, "{v:?}");
    }

    #[test]
    fn w_length_is_finite_and_stable_in_truncation() {
        let mut lengths = Vec::new();
        for k_max in [8, 10, 12] {
            let ex = make_example3::<f64>(Example3Params { k_max, ..Default::default() }).unwrap();
            let r = ex.w_length(1e-3).unwrap();
            assert!(r.converged);
            lengths.push(r.length);
        }
        assert!((lengths[1] - lengths[0]).abs() <= 1e-3 && (lengths[2] - lengths[1]).abs() <= 1e-3, "{lengths:?}");
        assert!(lengths[2] < 20.0);
    }

    #[test]
    fn induced_length_grows_with_every_hill() {
        let len = |k_max| {
            let ex = make_example3::<f64>(Example3Params { k_max, ..Default::default() }).unwrap();
            ex.induced_length(1e-3).unwrap().length
        };
        let (a, b, c) = (len(4), len(6), len(8));
        assert!(b - a > 1.0 && c - b > 1.0, "{a} {b} {c}");
    }

    #[test]
    fn zero_offset_places_ridges_off_the_plateaus() {
        // with b(0) = 0 every ramp of c crosses a hill and the length keeps growing
        let short = make_example3::<f64>(Example3Params { k_max: 2, hill_offset: 0.0 }).unwrap();
        let long = make_example3::<f64>(Example3Params { k_max: 4, hill_offset: 0.0 }).unwrap();
        let (a, b) = (short.w_length(1e-3).unwrap().length, long.w_length(1e-3).unwrap().length);
        assert!(b - a > 1.0, "{a} {b}");
    }
}
