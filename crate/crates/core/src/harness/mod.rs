//! Experiment harness: declarative configs, the fold/repetition runner,
//! adversarial sweeps, result bundles and reports.

pub mod bundle;
pub mod config;
pub mod report;
pub mod runner;
pub mod sweep;

pub use bundle::{
    results_dir, summarize, BundleKind, BundleManifest, ResultBundle, ScopeStats, Stats,
    SummaryRow, RESULTS_DIR_ENV,
};
pub use config::{
    Approach, CostSettings, DataSource, ExperimentConfig, ModelSettings, TrainingSettings, PROFILES,
};
pub use report::{
    cost_rows, cost_table, format_bytes, markdown, write_csv_report, CostRow, ReportFormat,
};
pub use runner::{
    cells, load_streams, mean_metrics, run_experiment, run_on_streams, Cell, RunOutput, RunRow,
    RunStatus, RunTiming,
};
pub use sweep::{attack_sweep, sweep_configs};
