//! Command-line layer: run configuration plus the five commands.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_eval, cmd_split, cmd_synth, cmd_train, cmd_triage, eval_report_path, load_network, triage_dir, ROW_DRN,
    ROW_ENSEMBLE, ROW_ENSEMBLE_FP, ROW_MIXNET,
};
pub use config::{RunConfig, Target};

/// Exit status when the triaged patient is PE.
pub const EXIT_PE: u8 = 2;
/// Exit status when the triaged patient is non-PE (and for every other successful command).
pub const EXIT_OK: u8 = 0;
/// Exit status on any error.
pub const EXIT_ERROR: u8 = 1;
