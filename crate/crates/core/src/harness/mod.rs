//! Command-line orchestration: layered run configuration, run directories
//! and the subcommands that tie the modules together.

pub mod cli;
mod commands;
pub mod config;
mod rundir;

pub use commands::{
    dataset_dir, embed_cmd, eval_cmd, pretrain_cmd, protocol_cmd, robustness_cmd, saliency_cmd, synth, train_heads,
};
pub use config::{DataConfig, RunConfig};
pub use rundir::{file_hash, RunDir, CONFIG_FILE, INPUTS_FILE};
