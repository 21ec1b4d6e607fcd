//! Bike-lane design pipeline engine: providers, agents, evaluation,
//! run orchestration, ingestion, reporting and the HTTP service.

pub use bikelane_core as core;

pub mod agents;
pub mod config;
pub mod evaluator;
pub mod imaging;
pub mod ingest;
pub mod orchestrator;
pub mod providers;
pub mod report;
pub mod service;
pub mod synth;
pub mod templates;
