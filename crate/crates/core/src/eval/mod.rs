//! Evaluation: metrics, benchmark scenarios and the edge-selection curve.

pub mod benchmark;
pub mod curve;
pub mod metrics;

use thiserror::Error;

pub use benchmark::{
    permutation_error_correlation, run_benchmark, write_report_csv, DecorrelationReport, Method, MethodContext,
    MetricRecord, PrecisionAtK, Scenario,
};
pub use curve::{edge_selection_likelihood_curve, write_curve_csv, CurveOptions, CurvePoint, CurveSeries};
pub use metrics::{auc, calibration_error, precision_at_fraction, spearman_stability, MetricError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Baseline(#[from] crate::baselines::BaselineError),
    #[error(transparent)]
    Infer(#[from] crate::infer::InferError),
    #[error(transparent)]
    Linalg(#[from] crate::linalg::LinalgError),
    #[error(transparent)]
    Sim(#[from] crate::graph_sim::SimError),
    #[error("method {0} needs a trained network")]
    MissingModel(&'static str),
    #[error("method {0} needs the generating precision matrix")]
    MissingTruth(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
