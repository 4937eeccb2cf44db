//! Configuration handling and subcommand implementations behind the `mlgrf`
//! binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;

pub use commands::{exit_code, RunOutcome};
pub use config::{RunConfig, SamplerKind};
