//! Utility-optimal TTLs for tree-shaped cache hierarchies with random fetch delays.

pub mod closed_form;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod objective;
pub mod ph;
pub mod sim;
pub mod solver;
pub mod steady;
pub mod tree;
pub mod ttl_file;
pub mod utility;
pub mod workload;

pub use error::{Error, Result};
