use std::sync::Arc;

use ehresmann_core::bundle::{
    shear_pair, BaseSpace, BoxDomain, BundleAtlas, BundlePoint, Chart, FiberModel, TransitionMap,
};
use ehresmann_core::connection::{blend, push_forward, ConstantWeights, Connection};
use ehresmann_core::construct::{build_complete_connection, ConstructOptions};
use ehresmann_core::lift::{horizontal_lift, parallel_transport, BaseCurve, LiftOptions};
use ehresmann_core::linalg::Mat;
use ehresmann_core::riemannian::metric::christoffel_from;
use ehresmann_core::riemannian::{
    christoffel, curve_length, geodesic, make_example3, CurveHandle, Example3Params, FiberedMetric, GeodesicOptions,
    Metric, QuadratureOptions, SurfaceMetric,
};
use proptest::prelude::*;

/// `t_ji(b, f) = e^{rate·b} f`.
fn scale_pair(i: usize, j: usize, rate: f64) -> (TransitionMap<f64>, TransitionMap<f64>) {
    let make = |src, tgt, r: f64| {
        TransitionMap::new(src, tgt, Arc::new(move |b: &[f64], f: &[f64]| vec![(r * b[0]).exp() * f[0]])).with_jacobians(
            Arc::new(move |b: &[f64], f: &[f64]| Mat::scalar(r * (r * b[0]).exp() * f[0])),
            Arc::new(move |b: &[f64], _f: &[f64]| Mat::scalar((r * b[0]).exp())),
        )
    };
    (make(i, j, rate), make(j, i, -rate))
}

/// Three charts over `[−3, 3]` whose outer boxes share `(−0.5, 0.5)`.
fn three_chart(rates: [f64; 2]) -> BundleAtlas<f64> {
    let base = BaseSpace::euclidean_box(BoxDomain::interval(-3.0, 3.0).unwrap());
    let c = |id, a, b, c, d| Chart::new(id, BoxDomain::interval(a, b).unwrap(), BoxDomain::interval(c, d).unwrap()).unwrap();
    let charts = vec![c(0, -3.0, -0.8, -4.0, 0.5), c(1, -1.5, 1.5, -2.0, 2.0), c(2, 0.8, 3.0, -0.5, 4.0)];
    let mut atlas = BundleAtlas::new(base, FiberModel::euclidean(1), charts).unwrap();
    for (i, j, r) in [(0, 1, rates[0]), (1, 2, rates[1]), (0, 2, rates[0] + rates[1])] {
        let (a, b) = scale_pair(i, j, r);
        atlas.add_transition(a).unwrap();
        atlas.add_transition(b).unwrap();
    }
    atlas
}

fn shear_two_chart(slope: f64) -> Arc<BundleAtlas<f64>> {
    let base = BaseSpace::euclidean_box(BoxDomain::interval(-2.0, 2.0).unwrap());
    let c0 = Chart::new(0, BoxDomain::interval(-2.0, 0.5).unwrap(), BoxDomain::interval(-3.0, 1.0).unwrap()).unwrap();
    let c1 = Chart::new(1, BoxDomain::interval(-0.5, 2.0).unwrap(), BoxDomain::interval(-1.0, 3.0).unwrap()).unwrap();
    let mut atlas = BundleAtlas::new(base, FiberModel::euclidean(1), vec![c0, c1]).unwrap();
    let (a, b) = shear_pair(0, 1, slope);
    atlas.add_transition(a).unwrap();
    atlas.add_transition(b).unwrap();
    Arc::new(atlas)
}

fn line_atlas(half: f64) -> Arc<BundleAtlas<f64>> {
    let base = BaseSpace::euclidean_box(BoxDomain::interval(-half, half).unwrap());
    Arc::new(BundleAtlas::product(base, FiberModel::euclidean(1)).unwrap())
}

fn average(atlas: Arc<BundleAtlas<f64>>) -> Connection<f64> {
    Connection::uniform(atlas, "average", |_b, f| Mat::scalar(f[0] * f[0]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chart_changes_invert(r0 in -1.0..1.0f64, r1 in -1.0..1.0f64, b in -0.49..0.49f64, f in -50.0..50.0f64) {
        let atlas = three_chart([r0, r1]);
        for i in 0..3 {
            for j in 0..3 {
                let pt = BundlePoint::new(i, vec![b], vec![f]);
                let back = atlas.change_chart(&atlas.change_chart(&pt, j).unwrap(), i).unwrap();
                prop_assert!((back.fiber[0] - f).abs() <= 1e-12 * f.abs().max(1.0));
            }
        }
    }

    #[test]
    fn transition_jacobians_match_differences(r in -1.0..1.0f64, s in -3.0..3.0f64, b in -0.49..0.49f64, f in -20.0..20.0f64) {
        let rel = |a: &Mat<f64>, d: &Mat<f64>| a.sub(d).max_abs() / d.max_abs().max(1.0);
        let (t, _) = scale_pair(0, 1, r);
        let (u, _) = shear_pair::<f64>(0, 1, s);
        for m in [&t, &u] {
            prop_assert!(rel(&m.jacobian_base(&[b], &[f]), &m.fd_jacobian_base(&[b], &[f])) <= 1e-5);
            prop_assert!(rel(&m.jacobian_fiber(&[b], &[f]), &m.fd_jacobian_fiber(&[b], &[f])) <= 1e-5);
        }
    }

    #[test]
    fn height_is_positive_and_proper(f in proptest::collection::vec(-1e3..1e3f64, 1..4)) {
        let model = FiberModel::<f64>::euclidean(f.len());
        let h = model.height(&f);
        let r = f.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(h > 0.0);
        prop_assert!(h >= model.alpha * r - model.beta);
    }

    #[test]
    fn lift_midpoint_residual_is_controlled(c0 in -1.0..1.0f64, c1 in -1.0..1.0f64, c2 in -2.0..2.0f64, y0 in -2.0..2.0f64) {
        let conn = Connection::uniform(line_atlas(5.0), "mixed", move |b, f| {
            Mat::scalar(c0 + c1 * f[0] + c2 * (b[0] * f[0]).sin())
        });
        let curve = BaseCurve::line(vec![-4.0], vec![1.0], 0.0, 8.0).unwrap();
        let trace = horizontal_lift(&conn, &curve, &BundlePoint::new(0, vec![-4.0], vec![y0]), &LiftOptions::default()).unwrap();
        prop_assert!(trace.max_residual_ratio <= 10.0, "ratio {}", trace.max_residual_ratio);
    }

    #[test]
    fn blow_up_times_decrease_with_the_start(a in 0.3..3.0f64, gap in 0.05..1.0f64) {
        let conn = average(line_atlas(10.0));
        let curve = BaseCurve::line(vec![0.0], vec![1.0], 0.0, 5.0).unwrap();
        let time = |y0: f64| {
            let mut opts = LiftOptions::default();
            opts.record_samples = false;
            horizontal_lift(&conn, &curve, &BundlePoint::new(0, vec![0.0], vec![y0]), &opts).unwrap().status.time().unwrap()
        };
        let (ta, tb) = (time(a), time(a + gap));
        prop_assert!(ta > tb);
        prop_assert!((ta - 1.0 / a).abs() <= 0.01 / a);
        prop_assert!((tb - 1.0 / (a + gap)).abs() <= 0.01 / (a + gap));
    }

    #[test]
    fn blend_with_a_unit_weight_returns_that_summand(b in -4.0..4.0f64, f in -5.0..5.0f64, k in 0usize..3) {
        let atlas = line_atlas(5.0);
        let conns = vec![
            average(atlas.clone()),
            Connection::uniform(atlas.clone(), "sin", |b, f| Mat::scalar((b[0] * f[0]).sin())),
            Connection::uniform(atlas.clone(), "lin", |b, _f| Mat::scalar(0.3 * b[0] - 1.0)),
        ];
        let mut w = vec![0.0; 3];
        w[k] = 1.0;
        let blended = blend(conns.clone(), Arc::new(ConstantWeights(w)), 16).unwrap();
        let got = blended.coefficient(0, &[b], &[f]).unwrap()[(0, 0)];
        let want = conns[k].coefficient(0, &[b], &[f]).unwrap()[(0, 0)];
        prop_assert!((got - want).abs() <= 2.0 * f64::EPSILON * want.abs());
    }

    #[test]
    fn push_forward_is_coherent(r0 in -1.0..1.0f64, r1 in -1.0..1.0f64, b in -0.49..0.49f64, f in -10.0..10.0f64, g in -5.0..5.0f64) {
        let atlas = three_chart([r0, r1]);
        let gamma = Mat::scalar(g);
        for (i, j, k) in [(0, 1, 2), (2, 1, 0), (1, 0, 2), (0, 2, 1)] {
            let fj = atlas.transform_fiber(i, j, &[b], &[f]).unwrap();
            let via = push_forward(&atlas, j, k, &[b], &fj, &push_forward(&atlas, i, j, &[b], &[f], &gamma).unwrap()).unwrap();
            let direct = push_forward(&atlas, i, k, &[b], &[f], &gamma).unwrap();
            prop_assert!(via.sub(&direct).max_abs() <= 1e-8 * direct.max_abs().max(1.0));
        }
    }

    #[test]
    fn transport_depends_smoothly_on_the_start(f0 in 0.1..3.0f64, t1 in 0.5..5.0f64) {
        let conn = Connection::uniform(line_atlas(10.0), "H1", |_b, f| {
            let s = f[0].sin();
            Mat::scalar(2.0 * f[0] * f[0] * s * s)
        });
        let curve = BaseCurve::line(vec![0.0], vec![1.0], 0.0, t1).unwrap();
        let h = 1e-6;
        let out = parallel_transport(&conn, &curve, 0, &[vec![f0 - h], vec![f0 + h]], &LiftOptions::default()).unwrap();
        prop_assert!(out.iter().all(|o| o.status.is_completed()));
        let d = (out[1].end.fiber[0] - out[0].end.fiber[0]) / (2.0 * h);
        prop_assert!(d.is_finite() && d > 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn construction_invariants_hold_for_any_shear(slope in -2.0..2.0f64) {
        let atlas = shear_two_chart(slope);
        let (conn, rec) = build_complete_connection(atlas, &ConstructOptions { rounds: 3, ..Default::default() }).unwrap();
        for chart in 0..2 {
            let radii: Vec<usize> = rec.tubes.iter().filter(|t| t.chart == chart).map(|t| t.radius).collect();
            prop_assert!(radii.windows(2).all(|w| w[0] < w[1]), "{radii:?}");
        }
        prop_assert!(rec.partition.max_off_tube_weight <= 1e-12);
        prop_assert!(rec.max_agreement_residual <= 1e-9);
        prop_assert!(rec.min_tube_separation > 0.0);
        prop_assert!(conn.coefficient(0, &[-1.0], &[0.3]).unwrap().max_abs().is_finite());
    }

    #[test]
    fn single_chart_construction_is_the_product(b in -1.9..1.9f64, f in -30.0..30.0f64) {
        let (conn, _) = build_complete_connection(line_atlas(2.0), &ConstructOptions { rounds: 2, ..Default::default() }).unwrap();
        prop_assert_eq!(conn.coefficient(0, &[b], &[f]).unwrap()[(0, 0)], 0.0);
    }
}

fn warped() -> SurfaceMetric<f64> {
    SurfaceMetric::new(
        BoxDomain::new(vec![-5.0, -5.0], vec![5.0, 5.0]).unwrap(),
        "warped",
        Arc::new(|x: f64, y: f64| [1.0 + x * x, 0.3 * x * y, 2.0 + y.sin()]),
    )
    .unwrap()
}

/// Richardson-extrapolated central differences of the metric (steps `h` and
/// `h/2`, scaled by `max(1, |xₖ|)`).
fn fd_metric<M: Metric<f64>>(m: &M, x: &[f64], h: f64) -> Vec<Mat<f64>> {
    let central = |k: usize, step: f64| {
        let (mut p, mut q) = (x.to_vec(), x.to_vec());
        p[k] += step;
        q[k] -= step;
        m.matrix(0, &p).unwrap().sub(&m.matrix(0, &q).unwrap()).scale(0.5 / step)
    };
    (0..x.len())
        .map(|k| {
            let step = h * x[k].abs().max(1.0);
            central(k, 0.5 * step).scale(4.0 / 3.0).sub(&central(k, step).scale(1.0 / 3.0))
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn example3_analytic_christoffels_match_differences(x in -6.0..6.0f64, y in 0.5..5.5f64) {
        let ex = make_example3::<f64>(Example3Params::default()).unwrap();
        for m in [&ex.induced, &ex.w_recipe] {
            let an = christoffel(m, 0, &[x, y]).unwrap();
            let g = m.matrix(0, &[x, y]).unwrap();
            // at the strip edges the metric grows without bound and no f64
            // difference quotient resolves 1e-5 any more
            prop_assume!(g.max_abs() <= 1e4);
            // relative to the largest symbol: single components can be small
            // differences of terms near 1e6 on the steep hill flanks
            let scale = an.iter().map(Mat::max_abs).fold(1.0, f64::max);
            // the hills change on scales from 1 down to 1e-4, so no single
            // step resolves every point: take the best of a step ladder
            let best = (3..=8)
                .map(|j| {
                    let fd = christoffel_from(&g, &fd_metric(m, &[x, y], 10f64.powi(-j))).unwrap();
                    (0..2).map(|k| an[k].sub(&fd[k]).max_abs()).fold(0.0, f64::max)
                })
                .fold(f64::INFINITY, f64::min);
            prop_assert!(best <= 1e-5 * scale, "difference {best:e} against {scale:e}");
        }
    }

    #[test]
    fn w_recipe_keeps_the_horizontal_slope(x in -6.0..6.0f64, y in 1e-3..5.5f64) {
        let ex = make_example3::<f64>(Example3Params::default()).unwrap();
        prop_assert!((ex.w_recipe.horizontal_slope(x, y) - ex.induced.horizontal_slope(x, y)).abs() <= 1e-9);
    }

    #[test]
    fn geodesic_speed_is_conserved(x in -5.0..-1.0f64, y in 2.5..4.5f64, angle in 0.0..6.28f64) {
        let ex = make_example3::<f64>(Example3Params::default()).unwrap();
        for m in [&ex.induced, &ex.w_recipe] {
            let tr = geodesic(m, 0, &[x, y], &[angle.cos(), angle.sin()], 10.0, &GeodesicOptions::default()).unwrap();
            prop_assert!(tr.max_speed_drift <= 1e-6, "drift {}", tr.max_speed_drift);
        }
    }

    #[test]
    fn horizontal_norms_ignore_the_fiber(b in -4.0..4.0f64, f1 in -5.0..5.0f64, f2 in -5.0..5.0f64, u in -2.0..2.0f64) {
        let conn = Connection::uniform(line_atlas(5.0), "twist", |b, f| Mat::scalar(f[0].sin() + 0.5 * b[0] * f[0]));
        let fm = FiberedMetric::with_flat_pieces(conn.clone());
        let norm_at = |f: f64| {
            let g = conn.coefficient(0, &[b], &[f]).unwrap()[(0, 0)];
            let v = [u, g * u];
            fm.matrix(0, &[b, f]).unwrap().bilinear(&v, &v)
        };
        prop_assert!((norm_at(f1) - norm_at(f2)).abs() <= 1e-9 * u * u + 1e-15);
    }

    #[test]
    fn length_is_additive_and_reparametrization_invariant(split in -0.9..1.4f64, k in 0.0..3.0f64) {
        let s = warped();
        let c = CurveHandle::new(0, Arc::new(|t: f64| vec![t, t * t - 1.0]), Arc::new(|t: f64| vec![1.0, 2.0 * t]));
        let o = QuadratureOptions::default();
        let whole = curve_length(&s, &c, -1.0, 1.5, &o).unwrap().length;
        let parts = curve_length(&s, &c, -1.0, split, &o).unwrap().length + curve_length(&s, &c, split, 1.5, &o).unwrap().length;
        prop_assert!((whole - parts).abs() <= 1e-8);
        // s(u) = −1 + 2.5 (u + k u³)/(1 + k) maps [0, 1] onto [−1, 1.5]
        let r = c.reparametrized(
            Arc::new(move |u: f64| vec![-1.0 + 2.5 * (u + k * u * u * u) / (1.0 + k)]),
            Arc::new(move |u: f64| vec![2.5 * (1.0 + 3.0 * k * u * u) / (1.0 + k)]),
        );
        prop_assert!((curve_length(&s, &r, 0.0, 1.0, &o).unwrap().length - whole).abs() <= 1e-6);
    }
}
