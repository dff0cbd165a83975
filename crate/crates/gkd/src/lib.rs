//! File formats, configuration and the command-line runner around
//! [`gkd_core`].
//!
//! - [`config`]: flat TOML experiment configuration and its hash.
//! - [`tensorfile`]: binary tensor files (little-endian f32 with a shape header).
//! - [`dataset_io`]: dataset export and import.
//! - [`checkpoint`]: per-phase checkpoint directories and loss logs.
//! - [`report`]: CSV and text evaluation reports.
//! - [`runner`]: phase orchestration behind the `gkd` binary.

pub mod checkpoint;
pub mod config;
pub mod dataset_io;
pub mod error;
pub mod hash;
pub mod lock;
pub mod pgm;
pub mod report;
pub mod runner;
pub mod tensorfile;

pub use config::ExperimentConfig;
pub use error::{GkdError, Result};
