//! Human-robot collaborative placement: simulator, preference populations,
//! a small neural stack for history-conditioned models, and the online
//! corrective adaptation loop.

pub mod adapt;
pub mod config;
pub mod env;
pub mod error;
pub mod io;
pub mod manifest;
pub mod nn;
pub mod policy;
pub mod population;
pub mod pretrain;
pub mod rng;
pub mod session;

pub use env::{EnvName, EnvironmentSpec, Episode, EpisodeRecord, StepRecord, WorldState};
pub use error::{Error, Result};
pub use population::{DemonstrationDataset, Population, PopulationConfig, PreferenceMatrix, Split};
