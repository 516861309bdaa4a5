//! Simulation and verification tools for a two-threshold stochastic rain
//! model and its spike-train limit.

pub mod cli;
pub mod converge;
pub mod error;
pub mod fokker_planck;
pub mod model;
pub mod path;
pub mod quad;
pub mod renewal;
pub mod rng;
pub mod simulate;
pub mod stats;

pub use error::{Error, Result};
pub use model::ModelParams;
pub use path::{EventLog, PathRecord, RainEvent, RainSignal};
pub use rng::RngStream;
