//! Std companion of `bicl-core`: IDX files on disk, experiment
//! configuration, runs and grids, result files, checkpoints and the
//! verification suites behind the `bicl` command line.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod experiment;
pub mod grid;
pub mod output;
pub mod verify;

pub use bicl_core as core;
