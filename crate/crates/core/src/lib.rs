pub mod analysis;
pub mod cdl;
pub mod cir;
pub mod cluster_gen;
pub mod config;
pub mod error;
pub mod evolution;
pub mod geometry;
pub mod io;
pub mod pipeline;
pub mod rng;
pub mod scenario;

pub use error::{Error, Result};
