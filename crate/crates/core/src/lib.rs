pub mod bownet;
pub mod classifier;
pub mod descriptor;
pub mod error;
pub mod experiments;
pub mod image;
pub mod manipulate;
pub mod modelio;
pub mod train;

pub use error::{Error, Result};
