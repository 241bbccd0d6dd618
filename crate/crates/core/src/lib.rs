//! Connections on fiber bundles: horizontal lifts, completeness probes, the
//! tube construction of complete connections, and fibered Riemannian metrics.
//!
//! Everything is generic over the scalar type through [`real::Real`]; the
//! aliases at the crate root fix it to `f64`.

pub mod bump;
pub mod bundle;
pub mod connection;
pub mod construct;
pub mod error;
pub mod lift;
pub mod linalg;
pub mod ode;
pub mod real;
pub mod riemannian;

pub use error::{Error, Result};
pub use real::Real;

pub type BoxDomain = bundle::BoxDomain<f64>;
pub type BaseSpace = bundle::BaseSpace<f64>;
pub type FiberModel = bundle::FiberModel<f64>;
pub type Chart = bundle::Chart<f64>;
pub type BundleAtlas = bundle::BundleAtlas<f64>;
pub type Mat = linalg::Mat<f64>;
pub type Connection = connection::Connection<f64>;
pub type BaseCurve = lift::BaseCurve<f64>;
pub type LiftTrace = lift::LiftTrace<f64>;
pub type LiftStatus = lift::LiftStatus<f64>;
pub type LiftOptions = lift::LiftOptions<f64>;
pub type ProbeOptions = lift::ProbeOptions<f64>;
pub type TubeFamily = construct::TubeFamily<f64>;
pub type SectionFamily = construct::SectionFamily<f64>;
pub type FiberedMetric = riemannian::FiberedMetric<f64>;
pub type SurfaceMetric = riemannian::SurfaceMetric<f64>;
pub type GeodesicTrace = riemannian::GeodesicTrace<f64>;
pub type GeodesicStatus = riemannian::GeodesicStatus<f64>;
pub type Example3 = riemannian::Example3<f64>;
