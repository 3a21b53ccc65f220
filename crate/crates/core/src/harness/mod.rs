//! Experiment runner: configuration, training, sweeps, gradient checks,
//! verification suites and reports.

pub mod config;
pub mod grad_check;
pub mod report;
pub mod train;
pub mod verify;

pub use config::{DataConfig, DataSource, ExperimentConfig, OptimConfig, OptimizerKind};
pub use grad_check::{grad_check, GradCheckReport};
pub use report::{emit_report, ReportFormat};
pub use train::{prepare_data, sweep, sweep_on, train, train_on, EpochRecord, PreparedData, RunRecord, SweepCell, SweepResult};
pub use verify::{verify, SuiteOutcome};
