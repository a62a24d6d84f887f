//! Filesystem, network and process plumbing around `fmea-panel-core`.

pub mod banks;
pub mod cli;
pub mod config;
pub mod gateway;
pub mod ingest;
pub mod service;
pub mod store;
