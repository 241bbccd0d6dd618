//! Named bundles, connections and metrics with their default run settings.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use ehresmann_core::bundle::{shear_pair, BaseSpace, BoxDomain, BundleAtlas, Chart, FiberModel};
use ehresmann_core::connection::Connection;
use ehresmann_core::construct::{build_complete_connection, ConstructOptions, ConstructionRecord, SectionFamily};
use ehresmann_core::lift::mix_seed;
use ehresmann_core::linalg::Mat;
use ehresmann_core::riemannian::{
    build_complete_fibered_metric, make_example3, Example3, Example3Params, FiberedMetric, Metric,
    MetricConstructOptions, MetricConstructionRecord, SurfaceMetric,
};
use serde::Serialize;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Serialize)]
pub struct ParamSpec {
    pub name: &'static str,
    pub default: f64,
    pub description: &'static str,
}

/// Fallbacks for every run option a scenario can be driven with.
#[derive(Clone, Debug, Serialize)]
pub struct Defaults {
    pub connection: &'static str,
    pub metric: Option<&'static str>,
    pub b0: Vec<f64>,
    pub y0: Vec<f64>,
    pub velocity: Vec<f64>,
    pub t0: f64,
    pub t1: f64,
    pub fibers: Vec<f64>,
    pub rounds: usize,
    pub trials: usize,
    pub horizon: f64,
    pub speed: f64,
    /// `None` means: the window covered by the construction.
    pub fiber_window: Option<(f64, f64)>,
    pub x0: Vec<f64>,
    pub v0: Vec<f64>,
    pub x1: Vec<f64>,
    pub tol: f64,
    pub k_range: i64,
    pub window: f64,
    pub radius: f64,
}

impl Default for Defaults {
    fn default() -> Self {
        Self {
            connection: "zero",
            metric: None,
            b0: vec![0.0],
            y0: vec![0.0],
            velocity: vec![1.0],
            t0: 0.0,
            t1: 1.0,
            fibers: vec![-1.0, 0.0, 1.0],
            rounds: 4,
            trials: 100,
            horizon: 10.0,
            speed: 1.0,
            fiber_window: Some((-3.0, 3.0)),
            x0: vec![0.0, 0.0],
            v0: vec![1.0, 0.0],
            x1: vec![1.0, 0.0],
            tol: 1e-6,
            k_range: 6,
            window: 10.0,
            radius: 0.5,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Scenario {
    pub name: &'static str,
    pub description: &'static str,
    pub params: Vec<ParamSpec>,
    pub connections: Vec<&'static str>,
    pub metrics: Vec<&'static str>,
    pub sections: Option<&'static str>,
    pub defaults: Defaults,
}

fn p(name: &'static str, default: f64, description: &'static str) -> ParamSpec {
    ParamSpec { name, default, description }
}

pub fn registry() -> Vec<Scenario> {
    vec![
        Scenario {
            name: "product-flat",
            description: "Trivial line bundle over an interval with the zero connection",
            params: vec![p("half_width", 10.0, "base is [-half_width, half_width]")],
            connections: vec!["zero"],
            metrics: vec!["product"],
            sections: None,
            defaults: Defaults {
                metric: Some("product"),
                ..Defaults::default()
            },
        },
        Scenario {
            name: "example1",
            description: "Line bundle with connections 2y²sin²y, 2y²cos²y and their average y²",
            params: vec![p("half_width", 200.0, "base is [-half_width, half_width]")],
            connections: vec!["H1", "H2", "average"],
            metrics: vec![],
            sections: Some("y = kπ"),
            defaults: Defaults {
                connection: "H1",
                y0: vec![1.0],
                fibers: vec![0.5, 1.0, 2.0],
                fiber_window: Some((0.5, 3.0)),
                ..Defaults::default()
            },
        },
        Scenario {
            name: "tube-demo",
            description: "Two charts over [-2, 2] glued by the shear f ↦ f + slope·b",
            params: vec![p("slope", 1.0, "shear slope of the transition")],
            connections: vec!["complete", "chart0", "chart1"],
            metrics: vec!["blended"],
            sections: None,
            defaults: Defaults {
                connection: "complete",
                metric: Some("blended"),
                b0: vec![-1.5],
                y0: vec![0.5],
                t1: 3.0,
                x0: vec![-1.0, 0.5],
                v0: vec![1.0, 0.3],
                x1: vec![1.0, 0.5],
                fiber_window: None,
                radius: 0.4,
                ..Defaults::default()
            },
        },
        Scenario {
            name: "compact-fiber",
            description: "Circle bundle with a seeded random bounded connection",
            params: vec![
                p("half_width", 10.0, "base is [-half_width, half_width]"),
                p("amplitude", 2.0, "bound on |Γ|"),
                p("modes", 3.0, "number of Fourier modes in the fiber"),
                p("connection_seed", 7.0, "seed of the random coefficients"),
            ],
            connections: vec!["random"],
            metrics: vec![],
            sections: None,
            defaults: Defaults {
                connection: "random",
                y0: vec![1.0],
                fiber_window: Some((0.0, 2.0 * PI)),
                horizon: 100.0,
                trials: 50,
                ..Defaults::default()
            },
        },
        Scenario {
            name: "example3",
            description: "Graph of a chain of hills over y > 0; bundle coordinate u = ln y",
            params: vec![
                p("k_max", 12.0, "hills φ_k for k ≤ k_max"),
                p("hill_offset", -8.0, "constant added to the ridge profile b"),
                p("half_width", 6.0, "base is [-half_width, half_width]"),
            ],
            connections: vec!["induced"],
            metrics: vec!["induced", "w-recipe"],
            sections: Some("σ_k: y = 4/2^k"),
            defaults: Defaults {
                connection: "induced",
                metric: Some("w-recipe"),
                b0: vec![-5.0],
                y0: vec![4.0f64.ln()],
                t1: 5.0,
                fiber_window: Some((-1.0, 2.0)),
                x0: vec![-4.5, 3.0],
                v0: vec![1.0, 0.0],
                x1: vec![-1.0, 3.0],
                tol: 1e-3,
                k_range: 5,
                window: 2.0,
                ..Defaults::default()
            },
        },
    ]
}

pub fn find(name: &str) -> CliResult<Scenario> {
    registry().into_iter().find(|s| s.name == name).ok_or_else(|| {
        let known: Vec<&str> = registry().iter().map(|s| s.name).collect();
        CliError::Invalid(format!("unknown scenario {name:?}; known: {}", known.join(", ")))
    })
}

pub enum MetricHandle {
    Fibered(FiberedMetric<f64>, Option<MetricConstructionRecord>),
    Surface(SurfaceMetric<f64>),
}

impl MetricHandle {
    pub fn as_metric(&self) -> &dyn Metric<f64> {
        match self {
            Self::Fibered(m, _) => m,
            Self::Surface(m) => m,
        }
    }
}

/// A scenario with resolved parameters and its atlas.
pub struct Instance {
    pub scenario: Scenario,
    pub params: BTreeMap<String, f64>,
    pub atlas: Arc<BundleAtlas<f64>>,
}

fn interval_atlas(half: f64, fiber: FiberModel<f64>) -> CliResult<Arc<BundleAtlas<f64>>> {
    if !(half > 0.0) {
        return Err(CliError::Invalid("half_width must be positive".into()));
    }
    let base = BaseSpace::euclidean_box(BoxDomain::interval(-half, half)?);
    Ok(Arc::new(BundleAtlas::product(base, fiber)?))
}

/// The tube-demo bundle: `U₀ = (−2, 0.5)`, `U₁ = (−0.5, 2)` inside `V₀ = (−3, 1)`, `V₁ = (−1, 3)`.
pub fn tube_demo_atlas(slope: f64) -> CliResult<Arc<BundleAtlas<f64>>> {
    let base = BaseSpace::euclidean_box(BoxDomain::interval(-2.0, 2.0)?);
    let c0 = Chart::new(0, BoxDomain::interval(-2.0, 0.5)?, BoxDomain::interval(-3.0, 1.0)?)?;
    let c1 = Chart::new(1, BoxDomain::interval(-0.5, 2.0)?, BoxDomain::interval(-1.0, 3.0)?)?;
    let mut atlas = BundleAtlas::new(base, FiberModel::euclidean(1), vec![c0, c1])?;
    let (a, b) = shear_pair(0, 1, slope);
    atlas.add_transition(a)?;
    atlas.add_transition(b)?;
    atlas.check_transitions()?;
    Ok(Arc::new(atlas))
}

/// Uniform draw in `[0, 1)` from a seed and an index.
fn unit(seed: u64, index: u64) -> f64 {
    (mix_seed(seed, index) >> 11) as f64 / (1u64 << 53) as f64
}

/// `Γ(b, θ) = Σⱼ Aⱼ sin(jθ + αⱼ) cos(ωⱼ b + βⱼ)` with `Σ Aⱼ = amplitude`.
pub fn random_circle_connection(
    atlas: Arc<BundleAtlas<f64>>,
    amplitude: f64,
    modes: usize,
    seed: u64,
) -> Connection<f64> {
    let mut coeffs = Vec::with_capacity(modes);
    for j in 0..modes {
        let k = 4 * j as u64;
        coeffs.push([
            0.2 + 0.8 * unit(seed, k),
            2.0 * PI * unit(seed, k + 1),
            0.2 + 1.8 * unit(seed, k + 2),
            2.0 * PI * unit(seed, k + 3),
        ]);
    }
    let total: f64 = coeffs.iter().map(|c| c[0]).sum();
    for c in &mut coeffs {
        c[0] *= amplitude / total;
    }
    Connection::uniform(atlas, "random", move |b, f| {
        let g: f64 = coeffs
            .iter()
            .enumerate()
            .map(|(j, c)| c[0] * ((j + 1) as f64 * f[0] + c[1]).sin() * (c[2] * b[0] + c[3]).cos())
            .sum();
        Mat::scalar(g)
    })
}

impl Instance {
    pub fn new(scenario: Scenario, overrides: &[(String, f64)]) -> CliResult<Self> {
        let mut params: BTreeMap<String, f64> = scenario.params.iter().map(|p| (p.name.to_string(), p.default)).collect();
        for (k, v) in overrides {
            match params.get_mut(k) {
                Some(slot) => *slot = *v,
                None => {
                    return Err(CliError::Invalid(format!(
                        "scenario {} has no parameter {k:?}",
                        scenario.name
                    )))
                }
            }
        }
        let half = params.get("half_width").copied().unwrap_or(1.0);
        let atlas = match scenario.name {
            "product-flat" | "example1" => interval_atlas(half, FiberModel::euclidean(1))?,
            "compact-fiber" => interval_atlas(half, FiberModel::circle())?,
            "tube-demo" => tube_demo_atlas(params["slope"])?,
            "example3" => {
                if !(half > 0.0) {
                    return Err(CliError::Invalid("half_width must be positive".into()));
                }
                Example3::log_atlas(half)?
            }
            other => return Err(CliError::Invalid(format!("scenario {other} has no builder"))),
        };
        let report = atlas.validate(16);
        if !report.is_clean(1e-9) {
            return Err(CliError::Invalid(format!("scenario {} fails atlas validation: {report:?}", scenario.name)));
        }
        Ok(Self { scenario, params, atlas })
    }

    fn param_usize(&self, name: &str) -> CliResult<usize> {
        let v = self.params[name];
        if v >= 0.0 && v.fract() == 0.0 && v < 1e9 {
            Ok(v as usize)
        } else {
            Err(CliError::Invalid(format!("parameter {name} must be a non-negative integer, got {v}")))
        }
    }

    pub fn example3(&self) -> CliResult<Example3<f64>> {
        let k_max = self.param_usize("k_max")?;
        Ok(make_example3(Example3Params {
            k_max,
            hill_offset: self.params["hill_offset"],
        })?)
    }

    /// Named connection; `complete` also yields its construction record.
    pub fn connection(&self, name: &str, rounds: usize) -> CliResult<(Connection<f64>, Option<ConstructionRecord>)> {
        let atlas = self.atlas.clone();
        let conn = match (self.scenario.name, name) {
            ("product-flat", "zero") => Connection::zero(atlas),
            ("example1", "H1") => Connection::uniform(atlas, "H1", |_b, f| {
                let s = f[0].sin();
                Mat::scalar(2.0 * f[0] * f[0] * s * s)
            }),
            ("example1", "H2") => Connection::uniform(atlas, "H2", |_b, f| {
                let c = f[0].cos();
                Mat::scalar(2.0 * f[0] * f[0] * c * c)
            }),
            ("example1", "average") => Connection::uniform(atlas, "average", |_b, f| Mat::scalar(f[0] * f[0])),
            ("tube-demo", "chart0") => Connection::chart_induced(atlas, 0)?,
            ("tube-demo", "chart1") => Connection::chart_induced(atlas, 1)?,
            ("tube-demo", "complete") => {
                let (c, rec) = build_complete_connection(atlas, &ConstructOptions { rounds, ..Default::default() })?;
                return Ok((c.with_name("complete"), Some(rec)));
            }
            ("compact-fiber", "random") => random_circle_connection(
                atlas,
                self.params["amplitude"],
                self.param_usize("modes")?.max(1),
                self.param_usize("connection_seed")? as u64,
            ),
            ("example3", "induced") => self.example3()?.induced_connection(atlas),
            (s, c) => {
                return Err(CliError::Invalid(format!(
                    "scenario {s} has no connection {c:?}; available: {}",
                    self.scenario.connections.join(", ")
                )))
            }
        };
        Ok((conn, None))
    }

    pub fn metric(&self, name: &str, rounds: usize) -> CliResult<MetricHandle> {
        match (self.scenario.name, name) {
            ("product-flat", "product") => Ok(MetricHandle::Fibered(
                FiberedMetric::with_flat_pieces(Connection::zero(self.atlas.clone())).with_name("product"),
                None,
            )),
            ("tube-demo", "blended") => {
                let (m, rec) = build_complete_fibered_metric(
                    self.atlas.clone(),
                    &MetricConstructOptions { rounds, ..Default::default() },
                )?;
                Ok(MetricHandle::Fibered(m.with_name("blended"), Some(rec)))
            }
            ("example3", "induced") => Ok(MetricHandle::Surface(self.example3()?.induced)),
            ("example3", "w-recipe") => Ok(MetricHandle::Surface(self.example3()?.w_recipe)),
            (s, m) => Err(CliError::Invalid(format!(
                "scenario {s} has no metric {m:?}; available: {}",
                if self.scenario.metrics.is_empty() { "none".to_string() } else { self.scenario.metrics.join(", ") }
            ))),
        }
    }

    /// Candidate horizontal sections with labels `|k| ≤ k_range`, in increasing fiber order.
    pub fn sections(&self, k_range: i64) -> CliResult<SectionFamily<f64>> {
        if k_range < 0 {
            return Err(CliError::Invalid("k_range must be non-negative".into()));
        }
        let domain = self.atlas.base.bounds.clone();
        match self.scenario.name {
            "example1" => {
                let values: Vec<(i64, f64)> = (-k_range..=k_range).map(|k| (k, k as f64 * PI)).collect();
                Ok(SectionFamily::constants(0, domain, &values))
            }
            "example3" => Ok(self.example3()?.section_family(domain, k_range)),
            s => Err(CliError::Invalid(format!("scenario {s} has no section family"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_lists_the_five_scenarios() {
        let names: Vec<&str> = registry().iter().map(|s| s.name).collect();
        assert_eq!(names, ["product-flat", "example1", "tube-demo", "compact-fiber", "example3"]);
        let ex1 = find("example1").unwrap();
        assert_eq!(ex1.connections, ["H1", "H2", "average"]);
        assert_eq!(find("example3").unwrap().metrics, ["induced", "w-recipe"]);
        assert!(find("nope").is_err());
    }

    #[test]
    fn every_scenario_builds_with_defaults() {
        for s in registry() {
            let name = s.name;
            let inst = Instance::new(s.clone(), &[]).unwrap();
            assert!(inst.atlas.validate(16).is_clean(1e-9));
            for c in &s.connections {
                inst.connection(c, 2).unwrap_or_else(|e| panic!("{name}/{c}: {e}"));
            }
            for m in &s.metrics {
                assert!(inst.metric(m, 2).is_ok(), "{name}/{m}");
            }
        }
    }

    #[test]
    fn unknown_parameter_is_rejected() {
        assert!(Instance::new(find("example1").unwrap(), &[("k_max".into(), 3.0)]).is_err());
        let inst = Instance::new(find("example3").unwrap(), &[("k_max".into(), 2.5)]).unwrap();
        assert!(inst.example3().is_err());
    }

    #[test]
    fn random_circle_connection_is_bounded_and_seeded() {
        let inst = Instance::new(find("compact-fiber").unwrap(), &[]).unwrap();
        let (a, _) = inst.connection("random", 0).unwrap();
        let (b, _) = inst.connection("random", 0).unwrap();
        for i in 0..200 {
            let x = -10.0 + 0.1 * i as f64;
            let th = 0.37 * i as f64;
            let ga = a.coefficient(0, &[x], &[th]).unwrap()[(0, 0)];
            assert_eq!(ga, b.coefficient(0, &[x], &[th]).unwrap()[(0, 0)]);
            assert!(ga.abs() <= 2.0 + 1e-12);
        }
        let other = random_circle_connection(inst.atlas.clone(), 2.0, 3, 8);
        assert_ne!(
            other.coefficient(0, &[0.3], &[0.4]).unwrap()[(0, 0)],
            a.coefficient(0, &[0.3], &[0.4]).unwrap()[(0, 0)]
        );
    }
}
