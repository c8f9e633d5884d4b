pub mod augment;
pub mod cli;
pub mod data;
pub mod error;
pub mod loss;
pub mod math;
pub mod model;
pub mod optim;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
