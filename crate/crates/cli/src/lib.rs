//! Command-line harness: configuration, the `generate | train | eval | ablate | sweep` commands, and their artifacts.

pub mod cli;
pub mod commands;
pub mod config;
