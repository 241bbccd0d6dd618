use thiserror::Error;

/// Failure modes of bundle, connection and metric operations.
///
/// Numerical payloads are carried as `f64` regardless of the scalar type the
/// computation ran in.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("base point {base:?} is not in the overlap of charts {from} and {to}")]
    OutOfOverlap {
        from: usize,
        to: usize,
        base: Vec<f64>,
    },
    #[error("no transition registered from chart {from} to chart {to}")]
    MissingTransition { from: usize, to: usize },
    #[error("unknown chart id {0}")]
    UnknownChart(usize),
    #[error("invalid atlas: {0}")]
    InvalidAtlas(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("start point base {start:?} does not lie over the curve's initial point {curve:?}")]
    StartMismatch { start: Vec<f64>, curve: Vec<f64> },
    #[error("no chart contains base point {0:?}")]
    NoChartContains(Vec<f64>),
    #[error("partition weights sum to {sum} at {base:?} (|sum - 1| > 1e-9)")]
    WeightSumViolation { sum: f64, base: Vec<f64> },
    #[error("summand {index} has positive weight at {base:?} but is undefined there")]
    UndefinedSummand { index: usize, base: Vec<f64> },
    #[error("horizontal lift from fiber point {fiber:?} to base {base:?} is incomplete: {status}")]
    IncompleteLift {
        base: Vec<f64>,
        fiber: Vec<f64>,
        status: String,
    },
    #[error("maximisation over tube intersections did not stabilise within budget (last change {change})")]
    SamplerBudgetExceeded { change: f64 },
    #[error("partition of unity degenerates at chart {chart} base {base:?} fiber {fiber:?} (sum of bumps {sum})")]
    PartitionGap {
        chart: usize,
        base: Vec<f64>,
        fiber: Vec<f64>,
        sum: f64,
    },
    #[error("blended connection deviates from the chart connection on tube {tube} by {residual}")]
    AgreementViolation { tube: usize, residual: f64 },
    #[error("point {0:?} is outside the metric's domain")]
    OutOfDomain(Vec<f64>),
    #[error("metric is not positive definite at {0:?}")]
    DegenerateMetric(Vec<f64>),
    #[error("quadrature did not converge: last refinements differ by {change}")]
    NonConvergent { change: f64 },
    #[error("thick tube at radius {radius} cannot reach separation 1 (best distance {distance})")]
    SeparationViolation { radius: usize, distance: f64 },
    #[error("exponential map degenerates at {at:?} (jacobian determinant {det})")]
    EmbeddingFailure { at: Vec<f64>, det: f64 },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
