//! Metrics, observation perturbation and model evaluation.

mod metrics;
mod perturb;
mod report;
mod runner;

pub use metrics::{ade, fde, kde_log_density, kde_nll, kde_nll_with, min_of_k, scott_bandwidth, KdeConfig, MinOfK, SelectMode};
pub use perturb::{perturb_observations, perturb_recording};
pub use report::{
    evaluate_records, read_dump, render_table, write_dump, KdeSource, MetricsReport, PredictionRecord, Robustness,
    SceneMetrics,
};
pub use runner::{
    displacement_summary, evaluate_model, kde_values, perturbed_source, predict_records, robustness, EvalConfig,
};
