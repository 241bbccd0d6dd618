//! Subcommand dispatch and artifact emission.

use std::collections::BTreeMap;

use ehresmann_core::bundle::{BundleAtlas, BundlePoint};
use ehresmann_core::construct::{
    build_complete_connection, check_disconnecting, ConstructOptions, DisconnectingOptions, Tube,
};
use ehresmann_core::lift::{
    completeness_probe, horizontal_lift, parallel_transport, BaseCurve, LiftOptions, LiftTrace, ProbeOptions,
};
use ehresmann_core::riemannian::{
    build_complete_fibered_metric, curve_length, exp_trivialization, geodesic, geodesic_probe, CurveHandle,
    ExpTrivializationOptions, GeodesicOptions, GeodesicProbeOptions, GeodesicTrace, Metric, MetricConstructOptions,
    QuadratureOptions,
};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::scenarios::{find, registry, Defaults, Instance, MetricHandle};

pub const SCHEMA_VERSION: &str = "1";
pub const THREADS_ENV: &str = "EHRESMANN_LAB_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CommandKind {
    Lift,
    Transport,
    Construct,
    Probe,
    Geodesic,
    Length,
    MetricConstruct,
    CheckLemma,
    ExpTriv,
    Scenarios,
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Lift => "lift",
            Self::Transport => "transport",
            Self::Construct => "construct",
            Self::Probe => "probe",
            Self::Geodesic => "geodesic",
            Self::Length => "length",
            Self::MetricConstruct => "metric-construct",
            Self::CheckLemma => "check-lemma",
            Self::ExpTriv => "exp-triv",
            Self::Scenarios => "scenarios",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Artifact {
    Json(String),
    Csv(String),
}

impl Artifact {
    pub fn text(&self) -> &str {
        match self {
            Self::Json(s) | Self::Csv(s) => s,
        }
    }

    pub fn json(&self) -> Option<serde_json::Value> {
        match self {
            Self::Json(s) => serde_json::from_str(s).ok(),
            Self::Csv(_) => None,
        }
    }
}

#[derive(Serialize)]
struct Envelope<'a, R> {
    schema_version: &'static str,
    command: &'static str,
    scenario: Option<&'a str>,
    seed: u64,
    params: Option<&'a BTreeMap<String, f64>>,
    result: R,
}

/// Thread cap from the environment; unset or empty means the core default.
pub fn threads_from_env() -> CliResult<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) if v.trim().is_empty() => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Invalid(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

struct Ctx {
    inst: Instance,
    cfg: RunConfig,
    d: Defaults,
    seed: u64,
    threads: Option<usize>,
}

impl Ctx {
    fn json<R: Serialize>(&self, kind: CommandKind, result: R) -> CliResult<Artifact> {
        envelope(kind, Some(self.inst.scenario.name), self.seed, Some(&self.inst.params), result)
    }

    fn connection_name(&self) -> String {
        self.cfg.connection.clone().unwrap_or_else(|| self.d.connection.to_string())
    }

    fn metric_name(&self) -> CliResult<String> {
        self.cfg
            .metric
            .clone()
            .or_else(|| self.d.metric.map(str::to_string))
            .ok_or_else(|| CliError::Invalid(format!("scenario {} has no metric", self.inst.scenario.name)))
    }

    fn rounds(&self) -> usize {
        self.cfg.rounds.unwrap_or(self.d.rounds)
    }

    fn vec(&self, v: &Option<Vec<f64>>, fallback: &[f64], what: &str, len: usize) -> CliResult<Vec<f64>> {
        let v = v.clone().unwrap_or_else(|| fallback.to_vec());
        if v.len() != len {
            return Err(CliError::Invalid(format!("{what} needs {len} components, got {}", v.len())));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(CliError::Invalid(format!("{what} must be finite")));
        }
        Ok(v)
    }

    fn positive(&self, v: Option<f64>, fallback: f64, what: &str) -> CliResult<f64> {
        let v = v.unwrap_or(fallback);
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(CliError::Invalid(format!("{what} must be positive, got {v}")))
        }
    }

    fn count(&self, v: Option<usize>, fallback: usize, what: &str) -> CliResult<usize> {
        match v.unwrap_or(fallback) {
            0 => Err(CliError::Invalid(format!("{what} must be at least 1"))),
            n => Ok(n),
        }
    }

    fn fiber_window(&self, covered: Option<f64>) -> CliResult<(f64, f64)> {
        let w = match (&self.cfg.fiber_window, self.d.fiber_window, covered) {
            (Some(v), _, _) => {
                if v.len() != 2 {
                    return Err(CliError::Invalid("fiber_window needs lo,hi".into()));
                }
                (v[0], v[1])
            }
            (None, Some(w), _) => w,
            (None, None, Some(c)) => (-c, c),
            (None, None, None) => (-3.0, 3.0),
        };
        if !(w.0 <= w.1) || !w.0.is_finite() || !w.1.is_finite() {
            return Err(CliError::Invalid(format!("fiber window {w:?} is empty")));
        }
        Ok(w)
    }

    fn atlas(&self) -> &BundleAtlas<f64> {
        &self.inst.atlas
    }

    fn line_curve(&self) -> CliResult<BaseCurve<f64>> {
        let n = self.atlas().dim_base();
        let b0 = self.vec(&self.cfg.b0, &self.d.b0, "b0", n)?;
        let vel = self.vec(&self.cfg.velocity, &self.d.velocity, "velocity", n)?;
        let t0 = self.cfg.t0.unwrap_or(self.d.t0);
        let t1 = self.cfg.t1.unwrap_or(self.d.t1);
        Ok(BaseCurve::line(b0, vel, t0, t1)?)
    }

    fn chart_at(&self, b: &[f64]) -> CliResult<usize> {
        Ok(self
            .atlas()
            .best_chart(b)
            .ok_or_else(|| ehresmann_core::Error::NoChartContains(b.to_vec()))?)
    }
}

fn envelope<R: Serialize>(
    kind: CommandKind,
    scenario: Option<&str>,
    seed: u64,
    params: Option<&BTreeMap<String, f64>>,
    result: R,
) -> CliResult<Artifact> {
    let env = Envelope {
        schema_version: SCHEMA_VERSION,
        command: kind.name(),
        scenario,
        seed,
        params,
        result,
    };
    let mut s = serde_json::to_string_pretty(&env).map_err(|e| CliError::Invalid(format!("json encoding failed: {e}")))?;
    s.push('\n');
    Ok(Artifact::Json(s))
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn csv_text(header: Vec<String>, rows: Vec<Vec<String>>) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Invalid(format!("csv encoding failed: {e}")))?;
    String::from_utf8(bytes).map_err(|e| CliError::Invalid(e.to_string()))
}

fn indexed(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |i| format!("{prefix}{i}"))
}

/// `t,chart_id,b1..bn,f1..fm,height,status` with the status on the last row only.
pub fn lift_csv(trace: &LiftTrace<f64>, n: usize, m: usize) -> CliResult<String> {
    let mut header = vec!["t".to_string(), "chart_id".to_string()];
    header.extend(indexed("b", n));
    header.extend(indexed("f", m));
    header.extend(["height".to_string(), "status".to_string()]);
    let last = trace.samples.len() - 1;
    let rows = trace
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut r = vec![num(s.t), s.point.chart.to_string()];
            r.extend(s.point.base.iter().map(|&x| num(x)));
            r.extend(s.point.fiber.iter().map(|&x| num(x)));
            r.push(num(s.height));
            r.push(if i == last { trace.status.label().to_string() } else { String::new() });
            r
        })
        .collect();
    csv_text(header, rows)
}

/// Lift columns plus `vb1..vbn,vf1..vfm,arc_length` before the status.
pub fn geodesic_csv(trace: &GeodesicTrace<f64>, metric: &dyn Metric<f64>) -> CliResult<String> {
    let n = metric.base_dim();
    let m = metric.dim() - n;
    let mut header = vec!["t".to_string(), "chart_id".to_string()];
    header.extend(indexed("b", n));
    header.extend(indexed("f", m));
    header.push("height".to_string());
    header.extend(indexed("vb", n));
    header.extend(indexed("vf", m));
    header.extend(["arc_length".to_string(), "status".to_string()]);
    let last = trace.samples.len() - 1;
    let rows = trace
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut r = vec![num(s.t), s.chart.to_string()];
            r.extend(s.position.iter().map(|&x| num(x)));
            r.push(num(metric.height(&s.position)));
            r.extend(s.velocity.iter().map(|&x| num(x)));
            r.push(num(s.arc_length));
            r.push(if i == last { trace.status.label().to_string() } else { String::new() });
            r
        })
        .collect();
    csv_text(header, rows)
}

#[derive(Serialize)]
struct TransportRow {
    start_fiber: Vec<f64>,
    end_chart: usize,
    end_base: Vec<f64>,
    end_fiber: Vec<f64>,
    status: &'static str,
    stop_time: Option<f64>,
}

#[derive(Serialize)]
struct TransportResult {
    connection: String,
    b0: Vec<f64>,
    velocity: Vec<f64>,
    t0: f64,
    t1: f64,
    outcomes: Vec<TransportRow>,
}

#[derive(Serialize)]
struct LengthResult {
    metric: String,
    curve: String,
    t0: f64,
    t1: f64,
    report: ehresmann_core::riemannian::LengthReport,
}

fn run_lift(c: &Ctx) -> CliResult<Artifact> {
    let (conn, _) = c.inst.connection(&c.connection_name(), c.rounds())?;
    let curve = c.line_curve()?;
    let b0 = curve.position(curve.t0);
    let m = c.atlas().dim_fiber();
    let y0 = c.vec(&c.cfg.y0, &c.d.y0, "y0", m)?;
    let start = BundlePoint::new(c.chart_at(&b0)?, b0, y0);
    let trace = horizontal_lift(&conn, &curve, &start, &LiftOptions::default())?;
    Ok(Artifact::Csv(lift_csv(&trace, c.atlas().dim_base(), m)?))
}

fn run_transport(c: &Ctx) -> CliResult<Artifact> {
    let name = c.connection_name();
    let (conn, _) = c.inst.connection(&name, c.rounds())?;
    let curve = c.line_curve()?;
    let b0 = curve.position(curve.t0);
    let m = c.atlas().dim_fiber();
    let flat = c.cfg.fibers.clone().unwrap_or_else(|| c.d.fibers.clone());
    if flat.is_empty() || flat.len() % m != 0 {
        return Err(CliError::Invalid(format!("fibers must hold a multiple of {m} values")));
    }
    let points: Vec<Vec<f64>> = flat.chunks(m).map(<[f64]>::to_vec).collect();
    let out = parallel_transport(&conn, &curve, c.chart_at(&b0)?, &points, &LiftOptions::default())?;
    let outcomes = out
        .into_iter()
        .map(|o| TransportRow {
            start_fiber: o.start.fiber,
            end_chart: o.end.chart,
            end_base: o.end.base,
            end_fiber: o.end.fiber,
            status: o.status.label(),
            stop_time: o.status.time(),
        })
        .collect();
    c.json(
        CommandKind::Transport,
        TransportResult {
            connection: name,
            b0,
            velocity: curve.velocity(curve.t0),
            t0: curve.t0,
            t1: curve.t1,
            outcomes,
        },
    )
}

fn run_construct(c: &Ctx) -> CliResult<Artifact> {
    let opts = ConstructOptions {
        rounds: c.count(c.cfg.rounds, c.d.rounds, "rounds")?,
        ..Default::default()
    };
    let (_, record) = build_complete_connection(c.inst.atlas.clone(), &opts)?;
    c.json(CommandKind::Construct, record)
}

fn run_probe(c: &Ctx) -> CliResult<Artifact> {
    #[derive(Serialize)]
    struct ProbeResult {
        fiber_window: (f64, f64),
        construction: Option<ehresmann_core::construct::ConstructionRecord>,
        report: ehresmann_core::lift::ProbeReport,
    }
    let (conn, record) = c.inst.connection(&c.connection_name(), c.rounds())?;
    let window = c.fiber_window(record.as_ref().map(|r| r.covered_fiber_window))?;
    let opts = ProbeOptions {
        trials: c.count(c.cfg.trials, c.d.trials, "trials")?,
        horizon: c.positive(c.cfg.horizon, c.d.horizon, "horizon")?,
        speed_bound: c.positive(c.cfg.speed, c.d.speed, "speed")?,
        seed: c.seed,
        base_region: None,
        fiber_window: window,
        threads: c.threads,
        lift: LiftOptions::default(),
    };
    let report = completeness_probe(&conn, &opts)?;
    c.json(
        CommandKind::Probe,
        ProbeResult {
            fiber_window: window,
            construction: record,
            report,
        },
    )
}

fn run_geodesic(c: &Ctx) -> CliResult<Artifact> {
    let handle = c.inst.metric(&c.metric_name()?, c.rounds())?;
    let metric = handle.as_metric();
    let d = metric.dim();
    let x0 = c.vec(&c.cfg.x0, &c.d.x0, "x0", d)?;
    let v0 = c.vec(&c.cfg.v0, &c.d.v0, "v0", d)?;
    let chart = match &handle {
        MetricHandle::Fibered(..) => c.chart_at(&x0[..metric.base_dim()])?,
        MetricHandle::Surface(_) => 0,
    };
    let horizon = c.positive(c.cfg.horizon, c.d.horizon, "horizon")?;
    let trace = geodesic(metric, chart, &x0, &v0, horizon, &GeodesicOptions::default())?;
    Ok(Artifact::Csv(geodesic_csv(&trace, metric)?))
}

fn run_length(c: &Ctx) -> CliResult<Artifact> {
    let name = c.metric_name()?;
    let handle = c.inst.metric(&name, c.rounds())?;
    let metric = handle.as_metric();
    let tol = c.positive(c.cfg.tol, c.d.tol, "tol")?;
    let explicit = c.cfg.x0.is_some() || c.cfg.x1.is_some();
    let (curve, t0, t1, label, open_end) = if c.inst.scenario.name == "example3" && !explicit {
        let ex = c.inst.example3()?;
        (ex.c_curve, -5.0, 0.0, "t -> (t, c(t)), t in (-5, 0)".to_string(), true)
    } else {
        let d = metric.dim();
        let a = c.vec(&c.cfg.x0, &c.d.x0, "x0", d)?;
        let b = c.vec(&c.cfg.x1, &c.d.x1, "x1", d)?;
        let label = format!("segment {a:?} -> {b:?}");
        let chart = match &handle {
            MetricHandle::Fibered(..) => c.chart_at(&a[..metric.base_dim()])?,
            MetricHandle::Surface(_) => 0,
        };
        (CurveHandle::segment(chart, a, b), 0.0, 1.0, label, false)
    };
    let opts = QuadratureOptions {
        tol,
        panel_tol: tol * 1e-4,
        max_refinements: 24,
        open_end,
        ..Default::default()
    };
    let report = curve_length(metric, &curve, t0, t1, &opts)?;
    c.json(
        CommandKind::Length,
        LengthResult {
            metric: name,
            curve: label,
            t0,
            t1,
            report,
        },
    )
}

fn run_metric_construct(c: &Ctx) -> CliResult<Artifact> {
    #[derive(Serialize)]
    struct MetricConstructResult {
        construction: ehresmann_core::riemannian::MetricConstructionRecord,
        fiber_window: (f64, f64),
        probe: ehresmann_core::riemannian::GeodesicProbeReport,
    }
    let opts = MetricConstructOptions {
        rounds: c.count(c.cfg.rounds, c.d.rounds, "rounds")?,
        ..Default::default()
    };
    let (fm, record) = build_complete_fibered_metric(c.inst.atlas.clone(), &opts)?;
    let tubes: Vec<Tube<f64>> = record
        .tubes
        .iter()
        .map(|t| Tube {
            chart: t.chart,
            radius: t.radius,
            round: t.round,
            thickness: t.thickness,
        })
        .collect();
    let window = c.fiber_window(Some(record.covered_fiber_window))?;
    let probe_opts = GeodesicProbeOptions {
        trials: c.count(c.cfg.trials, c.d.trials, "trials")?,
        horizon: c.positive(c.cfg.horizon, c.d.horizon, "horizon")?,
        seed: c.seed,
        fiber_window: window,
        threads: c.threads,
        ..Default::default()
    };
    let probe = geodesic_probe(&fm, &tubes, &probe_opts)?;
    c.json(
        CommandKind::MetricConstruct,
        MetricConstructResult {
            construction: record,
            fiber_window: window,
            probe,
        },
    )
}

fn run_check_lemma(c: &Ctx) -> CliResult<Artifact> {
    #[derive(Serialize)]
    struct LemmaResult {
        connection: String,
        k_range: i64,
        verdict: ehresmann_core::construct::DisconnectingVerdict,
    }
    let name = c.connection_name();
    let (conn, _) = c.inst.connection(&name, c.rounds())?;
    let k_range = c.cfg.k_range.unwrap_or(c.d.k_range);
    let family = c.inst.sections(k_range)?;
    let opts = DisconnectingOptions {
        window: c.positive(c.cfg.window, c.d.window, "window")?,
        ..Default::default()
    };
    let verdict = check_disconnecting(&conn, &family, &opts);
    c.json(
        CommandKind::CheckLemma,
        LemmaResult {
            connection: name,
            k_range,
            verdict,
        },
    )
}

fn run_exp_triv(c: &Ctx) -> CliResult<Artifact> {
    let name = c.metric_name()?;
    let handle = c.inst.metric(&name, c.rounds())?;
    let MetricHandle::Fibered(fm, _) = &handle else {
        return Err(CliError::Invalid(format!("exp-triv needs a fibered metric; {name} is a surface metric")));
    };
    let b0 = c.vec(&c.cfg.b0, &c.d.b0, "b0", c.atlas().dim_base())?;
    let radius = c.positive(c.cfg.radius, c.d.radius, "radius")?;
    let triv = exp_trivialization(fm, c.chart_at(&b0)?, &b0, radius, &ExpTrivializationOptions::default())?;
    c.json(CommandKind::ExpTriv, triv)
}

/// Runs `kind` on an already merged configuration and returns the artifact.
pub fn execute(kind: CommandKind, cfg: RunConfig) -> CliResult<Artifact> {
    let seed = cfg.seed.unwrap_or(0);
    if kind == CommandKind::Scenarios {
        return envelope(kind, None, seed, None, registry());
    }
    let name = cfg
        .scenario
        .clone()
        .ok_or_else(|| CliError::Invalid("a scenario is required (--scenario or \"scenario\" in the config)".into()))?;
    let scenario = find(&name)?;
    let d = scenario.defaults.clone();
    let inst = Instance::new(scenario, &cfg.params)?;
    let ctx = Ctx {
        inst,
        cfg,
        d,
        seed,
        threads: threads_from_env()?,
    };
    match kind {
        CommandKind::Lift => run_lift(&ctx),
        CommandKind::Transport => run_transport(&ctx),
        CommandKind::Construct => run_construct(&ctx),
        CommandKind::Probe => run_probe(&ctx),
        CommandKind::Geodesic => run_geodesic(&ctx),
        CommandKind::Length => run_length(&ctx),
        CommandKind::MetricConstruct => run_metric_construct(&ctx),
        CommandKind::CheckLemma => run_check_lemma(&ctx),
        CommandKind::ExpTriv => run_exp_triv(&ctx),
        CommandKind::Scenarios => unreachable!("handled above"),
    }
}

/// Merges the config file, executes, and writes the artifact to `out` when
/// set; returns the artifact and the path written, if any.
pub fn run(kind: CommandKind, cfg: RunConfig) -> CliResult<(Artifact, Option<std::path::PathBuf>)> {
    let cfg = cfg.resolve()?;
    let out = cfg.out.clone();
    let artifact = execute(kind, cfg)?;
    if let Some(path) = &out {
        std::fs::write(path, artifact.text()).map_err(|source| CliError::Write {
            path: path.clone(),
            source,
        })?;
    }
    Ok((artifact, out))
}
