pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod maa;
pub mod model;
pub mod objective;
pub mod similarity;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
