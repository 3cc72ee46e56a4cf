pub mod data;
pub mod error;
pub mod ndmath;

pub use error::{Error, Result};
pub mod loss;
pub mod model;
pub mod eval;
pub mod train;
pub mod cli;
