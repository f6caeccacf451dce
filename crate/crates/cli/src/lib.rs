//! Pipeline commands for dual-tree negative sampling experiments.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod pipeline;
