pub mod augment;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod rng;
pub mod stats;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
