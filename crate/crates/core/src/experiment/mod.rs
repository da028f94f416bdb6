//! Config-driven runs, ablation grids and their report files.

pub mod config;
pub mod grid;
pub mod output;
pub mod run;

pub use config::{DiagnosticsConfig, ExperimentConfig, GridCell, GridConfig};
pub use grid::{mean_std, run_grid, write_grid, GridOutput, SummaryRow};
pub use output::{write_diagnose, write_run, RUN_FILES};
pub use run::{
    build, diagnose_checkpoint, run_experiment, DeltaEntry, DiagnoseReport, RoutingReport, RunOutput, RunReport,
};

/// JSON schemas for the config and report formats, keyed by file name.
pub fn schemas() -> Vec<(&'static str, serde_json::Value)> {
    vec![
        (
            "experiment.schema.json",
            serde_json::to_value(schemars::schema_for!(ExperimentConfig)).expect("schema"),
        ),
        (
            "grid.schema.json",
            serde_json::to_value(schemars::schema_for!(GridConfig)).expect("schema"),
        ),
        (
            "report.schema.json",
            serde_json::to_value(schemars::schema_for!(RunReport)).expect("schema"),
        ),
        (
            "diagnose.schema.json",
            serde_json::to_value(schemars::schema_for!(DiagnoseReport)).expect("schema"),
        ),
        (
            "summary.schema.json",
            serde_json::to_value(schemars::schema_for!(Vec<SummaryRow>)).expect("schema"),
        ),
    ]
}
