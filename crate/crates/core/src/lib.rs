//! Simulation toolkit for timing leakage of backend-enriched features
//! through zero-skipping neural inference.
//!
//! The pipeline: [`datagen`] builds a tabular benchmark, [`nn`] trains a
//! ReLU victim, [`timing`] charges each forward pass by its activation
//! sparsity, [`service`] serves label-only answers with observable latency,
//! and [`attack`] recovers the hidden attribute from latency alone.
//! [`experiment`] wires these together.

pub mod attack;
pub mod datagen;
pub mod experiment;
pub mod nn;
pub mod report;
pub mod seed;
pub mod service;
pub mod timing;
pub mod util;
