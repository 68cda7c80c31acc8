pub mod benchmark;
pub mod cli;
pub mod datasets;
pub mod error;
pub mod exec;
pub mod gp;
pub mod layers;
pub mod models;
pub mod tensor;

pub use error::{Error, Result};
