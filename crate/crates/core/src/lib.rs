//! Exact tabular laboratory for partial action replacement in offline
//! multi-agent reinforcement learning on finite Dec-MDPs.

pub mod datagen;
pub mod decmdp;
pub mod error;
pub mod harness;
pub mod learners;
pub mod occupancy;
pub mod operators;
pub mod policies;
pub mod random;
pub mod theory;

pub use error::{Error, Result};
