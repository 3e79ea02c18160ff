//! Configuration, sweeps, statistics and reports.

mod config;
mod report;
mod stats;
mod sweep;

pub use config::{
    digest, ingest_dataset, stamped_json, EvalSettings, ExperimentConfig, IngestConfig, Phase,
    SweepSpec,
};
pub use report::{comparisons_json, export_report, regression_csv, results_csv, summary_text};
pub use stats::{
    bonferroni, chi2_sf_1, factor_regression, mcnemar_from_counts, mcnemar_test, ols, Coefficient,
    McNemar, McNemarMethod, OlsFit,
};
pub use sweep::{
    adapted_curves, derive_seed, enumerate_runs, run_one, run_sweep, save_run, select_best,
    split_by_name, Analysis, Comparison, RunKind, RunMetrics, RunResult, RunSpec, RunStatus,
    SweepResult, FACTORS,
};
