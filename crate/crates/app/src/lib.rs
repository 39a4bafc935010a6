//! Command-line workflow and HTTP service around `factcheck-core`.

pub mod cli;
pub mod config;
pub mod service;
pub mod workflow;
