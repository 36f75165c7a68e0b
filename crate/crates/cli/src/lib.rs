//! Experiment orchestration for the federated class-incremental simulator:
//! flat JSON configuration, per-seed run driver with self-describing
//! artifact directories, the cumulative component-ablation ladder, and SVG
//! plot emission. The heavy lifting lives in `fcil-core`; this crate binds
//! it to the command line.

pub mod ablation;
pub mod config;
pub mod driver;
pub mod plots;

pub use fcil_core::{Error, Result};
