//! World models in frozen feature spaces and planners that optimize through them.

pub mod diffcore;
pub mod encoder;
pub mod envs;
pub mod evalreport;
pub mod error;
pub mod finetune;
pub mod initnet;
pub mod planners;
pub mod rng;
pub mod worldmodel;

pub use error::{Error, Result};
