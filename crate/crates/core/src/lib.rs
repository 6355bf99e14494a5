pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod params;
pub mod ssl;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
