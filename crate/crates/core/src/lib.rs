pub mod cli;
pub mod coder;
pub mod error;
pub mod imageio;
pub mod lossy;
pub mod model;
pub mod pipeline;
pub mod quantizer;
pub mod trainer;

pub use error::{Error, Result};
