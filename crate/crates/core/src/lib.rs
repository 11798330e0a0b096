pub mod alphabet;
pub mod bench;
pub mod checksum;
pub mod coder;
pub mod container;
pub mod error;
pub mod mixer;
pub mod models;
pub mod neural;
pub mod pipeline;
pub mod skmer;
pub mod training;

pub use error::{Error, Result};
