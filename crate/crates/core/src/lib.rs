pub mod checkpoint;
mod error;
pub mod journeydata;
pub mod numerics;
pub mod seqmodel;
pub mod simulator;
pub mod textenc;
pub mod training;

pub use error::{Error, Result};
