//! Simulation of randomly pruned two-layer CNNs trained by full-batch
//! gradient descent on sparse-signal-plus-noise data, with exact tracking of
//! the signal/noise coefficient decomposition of every neuron.

pub mod decomp;
pub mod diagnostics;
pub mod error;
pub mod fmt;
pub mod model;
pub mod pruner;
pub mod rng;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
