//! Metrics, geodesics and lengths on bundles.

pub mod example3;
pub mod geodesic;
pub mod length;
pub mod metric;
pub mod thick;

pub use example3::{make_example3, Example3, Example3Params};
pub use geodesic::{
    exp_trivialization, geodesic, lift_geodesic, ExpTrivialization, ExpTrivializationOptions, GeodesicOptions,
    GeodesicStatus, GeodesicTrace, LiftGeodesicOptions, LiftGeodesicReport,
};
pub use length::{curve_length, CurveHandle, LengthReport, QuadratureOptions};
pub use metric::{christoffel, metric_eval, FiberedMetric, FlatMetric, Metric, SurfaceMetric};
pub use thick::{
    build_complete_fibered_metric, geodesic_probe, GeodesicProbeOptions, GeodesicProbeReport, MetricConstructOptions,
    MetricConstructionRecord,
};
