//! Contrastive knowledge assessment and adapter-based calibration of factual
//! knowledge in a small masked language model, on a synthetic knowledge world.

pub mod assess;
pub mod error;
pub mod interpret;
pub mod calinet;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod trainer;
pub mod worldgen;

pub use error::{Error, Result};
