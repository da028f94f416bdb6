//! Synthetic multi-task suite, the toy model trained on it, and the
//! training, evaluation and diagnostics loops.

pub mod diagnostics;
pub mod eval;
pub mod model;
pub mod suite;
pub mod train;

pub use diagnostics::{diagnose, DiagnosticsReport, Watched};
pub use eval::{delta_metric, evaluate, evaluate_oracle, evaluate_with, routing_table, MetricRow};
pub use model::{ConnectorConfig, Model, ModelConfig};
pub use suite::{
    make_task_suite, proportional_sampler, HeadKind, Prediction, ProportionalSampler, SuiteConfig, SyntheticBatch,
    Target, TaskSpec, TaskSuite, TaskTag,
};
pub use train::{train, LogRow, TrainConfig};
