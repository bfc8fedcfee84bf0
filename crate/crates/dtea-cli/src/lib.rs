//! Command-line front end for the fusion pipeline: config files, run
//! artifacts and their JSON schemas, the verification suites, and
//! micro-benchmarks.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
