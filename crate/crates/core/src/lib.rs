pub mod check;
pub mod complexity;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod model;
pub mod train;

pub use error::{Error, Result};
