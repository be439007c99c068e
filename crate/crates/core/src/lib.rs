pub mod error;
pub mod tensor;
pub mod autograd;
pub mod nn;
pub mod rng;
pub mod image;
pub mod scenes;
pub mod degradations;
pub mod backbone;
pub mod cfrm;
pub mod tfa;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod data;
pub mod trainer;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod ablation;

pub use error::{Error, Result};
