pub mod controller;
pub mod error;
pub mod experiment;
pub mod feedforward;
pub mod geometry;
pub mod grid;
pub mod kernel;
pub mod simulator;

pub use error::{Error, Result};
