//! Config-driven training runs, the ablation and sweep drivers, and their
//! reports.

mod config;
mod report;
mod run;
mod studies;

pub use config::{DataSource, RunConfig, ThroughputSpec, TrainSettings};
pub use report::{EpochRecord, ExperimentReport, PlanSummary, RunResults, Table, TableRow, Timing};
pub use run::{cmd_train, prepare, run_prepared, write_run_outputs, Prepared, RunOutcome};
pub use studies::{
    cmd_ablate_components, cmd_ablate_selection, cmd_sweep_blocks, cmd_sweep_rank, Direction,
    StudyOptions,
};
