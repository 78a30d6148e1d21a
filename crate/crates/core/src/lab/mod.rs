//! Experiment harness behind the command-line tool: configuration, run
//! manifests, and the train/distill/ablate/compare/verify commands.

mod commands;
mod config;
mod manifest;
mod verify;

pub use commands::{
    cmd_ablate, cmd_compare, cmd_distill, cmd_train, cmd_verify, metric_rows, AblateOutcome,
    CellRunRow, CompareOutcome, CurveRow, GridRow, MetricRow, TrainOutcome,
};
pub use config::{
    AblateConfig, CompareConfig, DatasetConfig, DatasetPreset, DenoiserConfig, DenoiserKind,
    EvaluationConfig, LabConfig, VerifyConfig,
};
pub use manifest::RunManifest;
pub use verify::{run_verification, CheckResult, VerifyReport};
