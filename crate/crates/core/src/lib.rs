//! RLHF finetuning of a small autoregressive symbolic-music generator.

pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod net;
pub mod policy;
pub mod preferences;
pub mod reward_model;
pub mod rewards;
pub mod rl;
pub mod rng;
pub mod symbolic;

pub use error::{Error, Result};
