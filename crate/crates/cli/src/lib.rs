//! File formats and command plumbing for the `adp` binary: TOML training
//! configs, versioned binary checkpoints, JSONL metrics logs, re-ID image
//! directory ingest, retrieval reports, visualization exports, and run
//! manifests.

pub mod checkpoint;
pub mod config;
pub mod ingest;
pub mod manifest;
pub mod metrics;
pub mod report;
pub mod viz;
