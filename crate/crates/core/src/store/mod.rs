//! Checkpoints and run configuration.

pub mod checkpoint;
pub mod config;

pub use checkpoint::{load_checkpoint, load_delta, load_elo_sub, load_full, save_checkpoint, Checkpoint, Kind};
pub use config::{parse_config, parse_config_str, DataConfig, EvalConfig, PhaseConfig, RunConfig, TrainConfig};
