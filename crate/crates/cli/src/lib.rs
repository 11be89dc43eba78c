//! Library surface of the `sona` command-line tool.
//!
//! The binary in `main.rs` is a thin argument-parsing shell; everything it
//! does is reachable through [`config::PipelineConfig`] (typed run
//! configuration with stage-level lineage hashes) and [`pipeline::Pipeline`]
//! (artifact-producing stages wired together on disk). Keeping the logic
//! here makes the full pipeline drivable from integration tests without
//! spawning processes.

pub mod config;
pub mod pipeline;

pub use config::PipelineConfig;
pub use pipeline::Pipeline;
