pub mod attack;
pub mod baselines;
pub mod config;
pub mod data;
pub mod defense;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
