//! Configured experiment runs, sweeps and traffic plans, with their
//! on-disk outputs.

pub mod commands;
pub mod config;
pub mod output;

pub use commands::{cmd_plan, cmd_run, cmd_sweep, output_root, run_dir_name, run_single, Plan, RunOutcome, VERSION};
pub use config::{resolve_arch, DataSource, ExperimentConfig};
pub use output::{read_checkpoint, read_csv_strict, write_checkpoint, SummaryRow};
