pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod demo;
pub mod error;
pub mod eval;
pub mod layers;
pub mod lm;
pub mod mhub;
pub mod model;
pub mod param;
pub mod pretrain;
pub mod tensor;
pub mod tokenizer;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
