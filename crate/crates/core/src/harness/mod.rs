//! Experiment orchestration: configuration, metrics, sweeps and summaries.

pub mod config;
pub mod experiment;
pub mod metrics;
pub mod summary;
pub mod sweep;

pub use config::{ExperimentConfig, Method, CONFIG_KEYS, DEFAULT_SEEDS};
pub use experiment::{
    evaluate, method_params, run_experiment, run_method, run_proposed, run_seed, run_seed_detailed,
    ExperimentReport, Scenario, SeedFailure,
};
pub use metrics::{
    accuracy, centroid_fit, centroid_predict, network_mse, read_records, write_records,
    CentroidClassifier, MetricsRecord, RecordWriter, CSV_HEADER,
};
pub use summary::{emit_summary, summary_text, write_summary_csv, SummaryRow};
pub use sweep::{run_sweep, sweep_points, SweepAxis, SweepReport};
