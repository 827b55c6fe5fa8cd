//! Simulation designs, benchmark estimators and Monte Carlo summaries.

pub mod design;
pub mod metrics;
pub mod monte_carlo;

pub use design::{Design, DesignId};
pub use metrics::{Draw, MetricsRow, FAILURE_FLAG_FRACTION};
pub use monte_carlo::{
    naive_estimator, oracle_estimator, run_monte_carlo, run_replicates, score_mean_at_truth, summarize,
    EstimatorSpec, MonteCarloConfig, ThetaSe,
};
