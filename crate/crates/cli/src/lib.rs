//! Scenario files, result tables, traces and commands for the `crisis` tool.

pub mod app;
pub mod scenario_file;
pub mod tables;
pub mod trace;
