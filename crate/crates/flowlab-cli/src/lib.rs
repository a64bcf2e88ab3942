//! IO companion to `flowlab-core`: run configuration, checkpoints, reports,
//! CSV/SVG output, wall-clock benchmarking, experiment orchestration, and
//! the `flowlab` command line.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod csvio;
pub mod experiments;
pub mod report;
