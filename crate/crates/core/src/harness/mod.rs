//! Benchmark orchestration, evaluation metrics and report persistence.

pub mod bench;
pub mod config;
mod desk;
#[cfg(test)]
mod fixture;
pub mod metrics;
pub mod sweep;

pub use bench::{run_benchmark, BenchmarkRun, GenerationReport, SampleRecord};
pub use config::{Method, ModelSet, RunConfig, TaskKind};
pub use desk::{DeskConfig, DeskModels, DeskReport};
