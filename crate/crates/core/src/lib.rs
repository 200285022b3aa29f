pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod lora;
pub mod loss;
pub mod nn;
pub mod seed;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
