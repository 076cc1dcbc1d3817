//! Reproducible fault-injection campaigns for neural-network inference.
//!
//! Faults are generated up front into a reusable fault matrix, applied to
//! neurons or weights of a small built-in inference engine, and evaluated by
//! running fault-free, faulty and hardened models side by side.

mod binio;
pub mod campaign;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod fault_gen;
pub mod injector;
pub mod model;
pub mod rng;
pub mod scenario;
pub mod tensor;

pub use error::{Error, Result};
