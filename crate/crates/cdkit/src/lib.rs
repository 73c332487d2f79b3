//! Std companion to `cdkit-core`: dataset files, checkpoints, run
//! configuration and the `cdkit` command line.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod runconfig;
