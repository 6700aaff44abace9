pub mod collab;
pub mod data;
pub mod error;
pub mod eval;
pub mod geo;
pub mod model;
pub mod neighbors;
pub mod refdata;
pub mod rng;
pub mod sim;
pub mod synth;

pub use error::{Error, Result};
