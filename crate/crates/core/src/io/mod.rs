//! Scenario files, event logs, report files and the command line.

pub mod cli;
pub mod config;
pub mod eventlog;
pub mod report;
