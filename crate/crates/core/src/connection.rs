//! Ehresmann connections as per-chart coefficient fields.
//!
//! In chart `i` the horizontal space at `(b, f)` is the graph
//! `{(v, Γᵢ(b, f) v)}` of an `m × n` matrix. Pushing the graph through a
//! transition gives `Γ⁽ʲ⁾ = ∂_b t_{ji} + ∂_f t_{ji} Γᵢ`.

use std::fmt;
use std::sync::Arc;

use crate::bundle::BundleAtlas;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::real::{lit, to_f64_vec, Real};

/// Coefficient field `(b, f) ↦ Γ(b, f)` in one chart's coordinates.
pub type CoefficientFn<T> = Arc<dyn Fn(&[T], &[T]) -> Mat<T> + Send + Sync>;

/// Smooth weights `λᵢ: E → [0, 1]` evaluated at a point given in chart coordinates.
pub trait WeightFamily<T: Real>: Send + Sync {
    fn len(&self) -> usize;

    fn weights(&self, chart: usize, b: &[T], f: &[T]) -> Result<Vec<T>>;
}

/// Weights that do not depend on the point.
#[derive(Clone, Debug)]
pub struct ConstantWeights<T>(pub Vec<T>);

impl<T: Real> WeightFamily<T> for ConstantWeights<T> {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn weights(&self, _chart: usize, _b: &[T], _f: &[T]) -> Result<Vec<T>> {
        Ok(self.0.clone())
    }
}

pub type WeightFn<T> = Arc<dyn Fn(usize, &[T], &[T]) -> T + Send + Sync>;

/// Weights given by closures `(chart, b, f) ↦ λᵢ`.
#[derive(Clone)]
pub struct FnWeights<T>(pub Vec<WeightFn<T>>);

impl<T: Real> WeightFamily<T> for FnWeights<T> {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn weights(&self, chart: usize, b: &[T], f: &[T]) -> Result<Vec<T>> {
        Ok(self.0.iter().map(|w| w(chart, b, f)).collect())
    }
}

#[derive(Clone)]
enum Kind<T: Real> {
    /// One field per chart, mutually compatible.
    Global(Vec<CoefficientFn<T>>),
    /// Defined on `p⁻¹(V_home)` only, given in the home chart.
    Local { home: usize, field: CoefficientFn<T> },
    Blend {
        parts: Vec<Connection<T>>,
        weights: Arc<dyn WeightFamily<T>>,
    },
}

#[derive(Clone)]
pub struct Connection<T: Real> {
    atlas: Arc<BundleAtlas<T>>,
    name: String,
    kind: Kind<T>,
}

impl<T: Real> fmt::Debug for Connection<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.kind {
            Kind::Global(_) => "global".to_string(),
            Kind::Local { home, .. } => format!("local(chart {home})"),
            Kind::Blend { parts, .. } => format!("blend of {}", parts.len()),
        };
        f.debug_struct("Connection")
            .field("name", &self.name)
            .field("kind", &kind)
            .finish()
    }
}

impl<T: Real> Connection<T> {
    /// Globally defined connection from one coefficient field per chart.
    pub fn global(atlas: Arc<BundleAtlas<T>>, name: impl Into<String>, fields: Vec<CoefficientFn<T>>) -> Result<Self> {
        if fields.len() != atlas.charts().len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} coefficient fields, got {}",
                atlas.charts().len(),
                fields.len()
            )));
        }
        Ok(Self {
            atlas,
            name: name.into(),
            kind: Kind::Global(fields),
        })
    }

    /// Same closure in every chart. Only compatible when the transitions allow it
    /// (always true for a single chart).
    pub fn uniform(
        atlas: Arc<BundleAtlas<T>>,
        name: impl Into<String>,
        field: impl Fn(&[T], &[T]) -> Mat<T> + Send + Sync + 'static,
    ) -> Self {
        let field: CoefficientFn<T> = Arc::new(field);
        let fields = vec![field; atlas.charts().len()];
        Self {
            atlas,
            name: name.into(),
            kind: Kind::Global(fields),
        }
    }

    /// `Γ ≡ 0` in every chart.
    pub fn zero(atlas: Arc<BundleAtlas<T>>) -> Self {
        let (m, n) = (atlas.dim_fiber(), atlas.dim_base());
        Self::uniform(atlas, "zero", move |_b, _f| Mat::zeros(m, n))
    }

    /// Connection living on `p⁻¹(V_home)`, given by its home-chart field.
    pub fn local(
        atlas: Arc<BundleAtlas<T>>,
        name: impl Into<String>,
        home: usize,
        field: CoefficientFn<T>,
    ) -> Result<Self> {
        atlas.chart(home)?;
        Ok(Self {
            atlas,
            name: name.into(),
            kind: Kind::Local { home, field },
        })
    }

    /// The product connection of chart `i`: `Hᵢ = dφᵢ⁻¹(TUᵢ × 0)`.
    pub fn chart_induced(atlas: Arc<BundleAtlas<T>>, chart: usize) -> Result<Self> {
        let (m, n) = (atlas.dim_fiber(), atlas.dim_base());
        Self::local(atlas, format!("induced-{chart}"), chart, Arc::new(move |_b, _f| Mat::zeros(m, n)))
    }

    pub fn atlas(&self) -> &Arc<BundleAtlas<T>> {
        &self.atlas
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn is_global(&self) -> bool {
        !matches!(self.kind, Kind::Local { .. })
    }

    /// Whether `Γ` can be evaluated at base point `b` in chart `chart`.
    pub fn defined_at(&self, chart: usize, b: &[T]) -> bool {
        match &self.kind {
            Kind::Local { home, .. } => self.atlas.in_outer(*home, b) && self.atlas.in_outer(chart, b),
            _ => self.atlas.in_outer(chart, b),
        }
    }

    /// `Γ(b, f)` in chart `chart` coordinates.
    pub fn coefficient(&self, chart: usize, b: &[T], f: &[T]) -> Result<Mat<T>> {
        match &self.kind {
            Kind::Global(fields) => {
                let field = fields.get(chart).ok_or(Error::UnknownChart(chart))?;
                if !self.atlas.in_outer(chart, b) {
                    return Err(Error::OutOfOverlap {
                        from: chart,
                        to: chart,
                        base: to_f64_vec(b),
                    });
                }
                Ok(field(b, f))
            }
            Kind::Local { home, field } => {
                if chart == *home {
                    if !self.atlas.in_outer(chart, b) {
                        return Err(Error::OutOfOverlap {
                            from: chart,
                            to: chart,
                            base: to_f64_vec(b),
                        });
                    }
                    return Ok(field(b, f));
                }
                let f_home = self.atlas.transform_fiber(chart, *home, b, f)?;
                let g = field(b, &f_home);
                push_forward(&self.atlas, *home, chart, b, &f_home, &g)
            }
            Kind::Blend { parts, weights } => {
                let lambda = weights.weights(chart, b, f)?;
                let sum: T = lambda.iter().copied().sum();
                if (sum - T::one()).abs() > lit(1e-9) {
                    return Err(Error::WeightSumViolation {
                        sum: sum.to_f64_lossy(),
                        base: to_f64_vec(b),
                    });
                }
                let mut acc = Mat::zeros(self.atlas.dim_fiber(), self.atlas.dim_base());
                for (i, (part, &w)) in parts.iter().zip(&lambda).enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    if !part.defined_at(chart, b) {
                        return Err(Error::UndefinedSummand {
                            index: i,
                            base: to_f64_vec(b),
                        });
                    }
                    acc.axpy(w, &part.coefficient(chart, b, f)?);
                }
                Ok(acc)
            }
        }
    }

    /// `Γ v`, the vertical component of the horizontal lift of `v`.
    pub fn lift_vector(&self, chart: usize, b: &[T], f: &[T], v: &[T]) -> Result<Vec<T>> {
        Ok(self.coefficient(chart, b, f)?.mul_vec(v))
    }

    /// Coefficient of this connection's horizontal space at a chart-`from`
    /// point, expressed in chart `to`.
    pub fn push_forward(&self, from: usize, to: usize, b: &[T], f: &[T]) -> Result<Mat<T>> {
        let g = self.coefficient(from, b, f)?;
        push_forward(&self.atlas, from, to, b, f, &g)
    }

    /// Largest disagreement between charts of a global connection:
    /// `|push_forward(Γᵢ) − Γⱼ|` over sampled overlap points.
    pub fn compatibility_residual(&self, base_samples: usize) -> Result<T> {
        let atlas = &self.atlas;
        let mut worst = T::zero();
        for b in atlas.base.bounds.interior_grid(base_samples.max(1)) {
            let here: Vec<usize> = (0..atlas.charts().len()).filter(|&i| self.defined_at(i, &b)).collect();
            for f in atlas.fiber_samples(7, lit(3.0)) {
                for &i in &here {
                    for &j in &here {
                        if i == j {
                            continue;
                        }
                        let pushed = self.push_forward(i, j, &b, &f)?;
                        let fj = atlas.transform_fiber(i, j, &b, &f)?;
                        let direct = self.coefficient(j, &b, &fj)?;
                        worst = worst.max(pushed.sub(&direct).max_abs());
                    }
                }
            }
        }
        Ok(worst)
    }
}

/// `Γ⁽ʲ⁾ = ∂_b t_{ji}(b, f) + ∂_f t_{ji}(b, f) · Γᵢ` with `f` in chart `from`.
pub fn push_forward<T: Real>(
    atlas: &BundleAtlas<T>,
    from: usize,
    to: usize,
    b: &[T],
    f: &[T],
    gamma_from: &Mat<T>,
) -> Result<Mat<T>> {
    if from == to {
        atlas.transform_fiber(from, to, b, f)?;
        return Ok(gamma_from.clone());
    }
    let (jb, jf) = atlas.transition_jacobians(from, to, b, f)?;
    Ok(jb.add(&jf.matmul(gamma_from)))
}

/// Convex combination `Σ λᵢ Γᵢ`, with each summand expressed in the evaluation
/// chart. Weights are validated on a sample of the region of interest.
pub fn blend<T: Real>(
    conns: Vec<Connection<T>>,
    weights: Arc<dyn WeightFamily<T>>,
    validation_samples: usize,
) -> Result<Connection<T>> {
    let first = conns
        .first()
        .ok_or_else(|| Error::InvalidArgument("blend needs at least one connection".into()))?;
    if weights.len() != conns.len() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} connections",
            weights.len(),
            conns.len()
        )));
    }
    let atlas = first.atlas.clone();
    let name = format!(
        "blend({})",
        conns.iter().map(|c| c.name.as_str()).collect::<Vec<_>>().join(",")
    );
    let blended = Connection {
        atlas: atlas.clone(),
        name,
        kind: Kind::Blend { parts: conns, weights },
    };
    if validation_samples > 0 {
        for b in atlas.base.bounds.interior_grid(validation_samples) {
            for chart in 0..atlas.charts().len() {
                if !atlas.in_outer(chart, &b) {
                    continue;
                }
                for f in atlas.fiber_samples(7, lit(3.0)) {
                    blended.coefficient(chart, &b, &f)?;
                }
            }
        }
    }
    Ok(blended)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::{identity_pair, shear_pair, BaseSpace, BoxDomain, Chart, FiberModel, TransitionMap};

    fn line_atlas() -> Arc<BundleAtlas<f64>> {
        let base = BaseSpace::euclidean_box(BoxDomain::interval(-10.0, 10.0).unwrap());
        Arc::new(BundleAtlas::product(base, FiberModel::euclidean(1)).unwrap())
    }

    fn two_chart(slope: f64) -> Arc<BundleAtlas<f64>> {
        let base = BaseSpace::euclidean_box(BoxDomain::interval(-2.0, 2.0).unwrap());
        let c0 = Chart::new(0, BoxDomain::interval(-2.0, 0.5).unwrap(), BoxDomain::interval(-3.0, 1.0).unwrap()).unwrap();
        let c1 = Chart::new(1, BoxDomain::interval(-0.5, 2.0).unwrap(), BoxDomain::interval(-1.0, 3.0).unwrap()).unwrap();
        let mut atlas = BundleAtlas::new(base, FiberModel::euclidean(1), vec![c0, c1]).unwrap();
        let (a, b) = if slope == 0.0 { identity_pair(0, 1) } else { shear_pair(0, 1, slope) };
        atlas.add_transition(a).unwrap();
        atlas.add_transition(b).unwrap();
        Arc::new(atlas)
    }

    #[test]
    fn push_forward_identity_keeps_coefficient() {
        let atlas = two_chart(0.0);
        let g = Mat::scalar(0.7);
        let out = push_forward(&atlas, 0, 1, &[0.0], &[1.0], &g).unwrap();
        assert_eq!(out, g);
    }

    #[test]
    fn push_forward_shear_of_zero_is_one() {
        let atlas = two_chart(1.0);
        let h0 = Connection::chart_induced(atlas.clone(), 0).unwrap();
        for &(b, f) in &[(0.0, 1.0), (-0.7, -3.0), (0.9, 10.0)] {
            let g = h0.coefficient(1, &[b], &[f]).unwrap();
            assert!((g[(0, 0)] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn push_forward_matches_secant_of_transported_segment() {
        // nonlinear transition t(b, f) = f·e^{b} + sin b, finite-difference Jacobians
        let base = BaseSpace::euclidean_box(BoxDomain::interval(-1.0, 1.0).unwrap());
        let c0 = Chart::new(0, BoxDomain::interval(-1.0, 0.4).unwrap(), BoxDomain::interval(-2.0, 0.8).unwrap()).unwrap();
        let c1 = Chart::new(1, BoxDomain::interval(-0.4, 1.0).unwrap(), BoxDomain::interval(-0.8, 2.0).unwrap()).unwrap();
        let mut atlas = BundleAtlas::new(base, FiberModel::euclidean(1), vec![c0, c1]).unwrap();
        atlas
            .add_transition(TransitionMap::new(0, 1, Arc::new(|b: &[f64], f: &[f64]| vec![f[0] * b[0].exp() + b[0].sin()])))
            .unwrap();
        atlas
            .add_transition(TransitionMap::new(1, 0, Arc::new(|b: &[f64], f: &[f64]| vec![(f[0] - b[0].sin()) * (-b[0]).exp()])))
            .unwrap();
        let atlas = Arc::new(atlas);
        let gamma = |b: &[f64], f: &[f64]| Mat::scalar(0.3 * f[0] + b[0]);
        let conn = Connection::local(atlas.clone(), "g", 0, Arc::new(gamma)).unwrap();
        let (b, f) = (0.1, 0.8);
        let slope = conn.push_forward(0, 1, &[b], &[f]).unwrap()[(0, 0)];
        // secant oracle: move along the horizontal segment in chart 0 and map both ends
        let h = 1e-6;
        let g0 = gamma(&[b], &[f])[(0, 0)];
        let t = |b: f64, f: f64| f * b.exp() + b.sin();
        let secant = (t(b + h, f + g0 * h) - t(b - h, f - g0 * h)) / (2.0 * h);
        assert!((slope - secant).abs() < 1e-6, "{slope} vs {secant}");
    }

    #[test]
    fn push_forward_cocycle_coherence() {
        let base = BaseSpace::euclidean_box(BoxDomain::interval(-1.0, 1.0).unwrap());
        let boxes = [(-1.0, 0.5), (-0.6, 0.8), (-0.3, 1.0)];
        let charts = boxes
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| Chart::new(i, BoxDomain::interval(a, b).unwrap(), BoxDomain::interval(a - 0.3, b + 0.3).unwrap()).unwrap())
            .collect();
        let mut atlas = BundleAtlas::new(base, FiberModel::euclidean(1), charts).unwrap();
        let slopes = [0.0, 1.5, -0.5];
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    let (si, sj) = (slopes[i], slopes[j]);
                    // fiber coordinate in chart k is f₀·2^k + s_k·b
                    let scale = 2f64.powi(j as i32 - i as i32);
                    atlas
                        .add_transition(TransitionMap::new(
                            i,
                            j,
                            Arc::new(move |b: &[f64], f: &[f64]| vec![(f[0] - si * b[0]) * scale + sj * b[0]]),
                        ))
                        .unwrap();
                }
            }
        }
        let atlas = Arc::new(atlas);
        let conn = Connection::local(atlas.clone(), "g", 0, Arc::new(|b: &[f64], f: &[f64]| Mat::scalar(f[0].sin() + b[0]))).unwrap();
        for &b in &[-0.2, 0.0, 0.3] {
            for &f in &[-1.0, 0.5, 2.0] {
                let f1 = atlas.transform_fiber(0, 1, &[b], &[f]).unwrap();
                let g1 = conn.coefficient(1, &[b], &f1).unwrap();
                let via = push_forward(&atlas, 1, 2, &[b], &f1, &g1).unwrap();
                let direct = conn.push_forward(0, 2, &[b], &[f]).unwrap();
                assert!(via.sub(&direct).max_abs() < 1e-8);
            }
        }
    }

    fn h1(atlas: &Arc<BundleAtlas<f64>>) -> Connection<f64> {
        Connection::uniform(atlas.clone(), "H1", |_b, f| {
            let s = f[0].sin();
            Mat::scalar(2.0 * f[0] * f[0] * s * s)
        })
    }

    fn h2(atlas: &Arc<BundleAtlas<f64>>) -> Connection<f64> {
        Connection::uniform(atlas.clone(), "H2", |_b, f| {
            let c = f[0].cos();
            Mat::scalar(2.0 * f[0] * f[0] * c * c)
        })
    }

    #[test]
    fn unit_weight_reproduces_summand_bitwise() {
        let atlas = line_atlas();
        let bl = blend(vec![h1(&atlas), h2(&atlas)], Arc::new(ConstantWeights(vec![1.0, 0.0])), 8).unwrap();
        for &y in &[0.1, 1.3, 2.9, -4.2] {
            assert_eq!(bl.coefficient(0, &[0.0], &[y]).unwrap(), h1(&atlas).coefficient(0, &[0.0], &[y]).unwrap());
        }
    }

    #[test]
    fn average_of_example_connections_is_y_squared() {
        let atlas = line_atlas();
        let bl = blend(vec![h1(&atlas), h2(&atlas)], Arc::new(ConstantWeights(vec![0.5, 0.5])), 8).unwrap();
        for &y in &[0.1, 1.3, 2.9, -4.2] {
            let g = bl.coefficient(0, &[0.0], &[y]).unwrap()[(0, 0)];
            assert!((g - y * y).abs() < 1e-12 * (y * y).max(1.0));
        }
    }

    #[test]
    fn self_blend_is_idempotent() {
        let atlas = line_atlas();
        let w: WeightFn<f64> = Arc::new(|_, b, _| 0.5 + 0.4 * b[0].sin());
        let w2 = w.clone();
        let weights = FnWeights(vec![w, Arc::new(move |c, b, f| 1.0 - w2(c, b, f))]);
        let bl = blend(vec![h1(&atlas), h1(&atlas)], Arc::new(weights), 8).unwrap();
        for &(b, y) in &[(0.3, 0.1), (-2.0, 1.3), (5.0, 2.9)] {
            let g = bl.coefficient(0, &[b], &[y]).unwrap()[(0, 0)];
            let h = h1(&atlas).coefficient(0, &[b], &[y]).unwrap()[(0, 0)];
            assert!((g - h).abs() <= 1e-14 * h.abs().max(1.0));
        }
    }

    #[test]
    fn blend_rejects_bad_weights() {
        let atlas = line_atlas();
        let err = blend(vec![h1(&atlas), h2(&atlas)], Arc::new(ConstantWeights(vec![0.5, 0.6])), 4).unwrap_err();
        assert!(matches!(err, Error::WeightSumViolation { .. }));
    }

    #[test]
    fn blend_rejects_undefined_summand() {
        let atlas = two_chart(1.0);
        let h1 = Connection::chart_induced(atlas.clone(), 1).unwrap();
        let h0 = Connection::chart_induced(atlas.clone(), 0).unwrap();
        let err = blend(vec![h0, h1], Arc::new(ConstantWeights(vec![0.5, 0.5])), 16).unwrap_err();
        assert!(matches!(err, Error::UndefinedSummand { .. }));
    }

    #[test]
    fn global_shear_connection_is_compatible() {
        let atlas = two_chart(1.0);
        // Γ₀ = 0 and Γ₁ = 1 describe the same distribution
        let conn = Connection::global(
            atlas.clone(),
            "flat",
            vec![Arc::new(|_b: &[f64], _f: &[f64]| Mat::scalar(0.0)), Arc::new(|_b: &[f64], _f: &[f64]| Mat::scalar(1.0))],
        )
        .unwrap();
        assert!(conn.compatibility_residual(32).unwrap() < 1e-12);
        let wrong = Connection::zero(atlas);
        assert!(wrong.compatibility_residual(32).unwrap() > 0.5);
    }
}
