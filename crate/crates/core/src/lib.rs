pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod feedback;
pub mod grid;
pub mod imageio;
pub mod matchers;
pub mod metrics;
pub mod params;
pub mod rng;
pub mod scoring;
pub mod synthpop;
pub mod workflow;

pub use error::{Error, Result};
pub use grid::Grid;
