pub mod agent;
pub mod attention;
pub mod error;
pub mod eval;
pub mod parse;
pub mod world;
pub mod tensor;
pub mod train;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
