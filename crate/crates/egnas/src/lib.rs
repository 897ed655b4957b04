//! Edge-featured graph neural architecture search on synthetic graph tasks.
//!
//! The crate searches message-passing cells over dual DAGs — one updating
//! entity (node) features, one updating relation (edge) features — with a
//! differentiable supernet, derives discrete genotypes, and retrains them
//! on node-, edge- and graph-level benchmarks generated in-process.

pub mod autodiff;
pub mod cell;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod error;
pub mod genotype;
pub mod graph;
pub mod harness;
pub mod jsonl;
pub mod layers;
pub mod network;
pub mod optim;
pub mod search;
pub mod searchspace;
pub mod train;

pub use error::{Error, Result};
