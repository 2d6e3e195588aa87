pub mod cli;
pub mod dataset;
pub mod density;
pub mod error;
pub mod eval;
pub mod goal;
pub mod model;
pub mod nn;
pub mod relation;
pub mod source;
pub mod train;

pub use error::{Error, Result};
