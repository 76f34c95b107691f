//! Training loops, evaluation, reports, checkpoints and grid search.

mod checkpoint;
mod compare;
mod config;
mod experiment;
mod grid;
mod report;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use compare::{read_report_dir, sem, summarize, write_table, Summary};
pub use config::{ConfigFile, Hyper, Method, RunConfig};
pub use experiment::{build_stream, finish_run, resume_experiment, run_experiment, run_many, run_with_checkpoint};
pub use grid::{apply_grid_value, grid_search, GridCell, GridFile, GridResult, GRID_KEYS};
pub use report::{mean, read_rows, write_rows, ReportRow, RunReport};
pub use train::{Consolidation, GeneratorState, Model, RunState, Teacher, Trainer, LOSS_WINDOW};
