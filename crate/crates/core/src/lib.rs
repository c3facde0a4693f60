pub mod data;
pub mod discriminators;
pub mod error;
pub mod evaluation;
pub mod mcts;
pub mod model;
pub mod numerics;
pub mod profiling;
pub mod training;

pub use error::{Error, Result};
