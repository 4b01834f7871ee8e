pub mod align;
pub mod error;
pub mod genmodel;
pub mod harness;
pub mod numerics;
pub mod reward;
pub mod rng;
pub mod simulator;
pub mod tokenizer;

pub use error::{Error, Result};
