pub mod audit;
pub mod baseline;
pub mod cli;
pub mod config;
pub mod error;
pub mod interp;
pub mod linalg;
pub mod map;
pub mod model;
pub mod sampler;
pub mod spatial;
pub mod store;
pub mod synth;
pub mod transforms;

pub use error::{Error, Result};
