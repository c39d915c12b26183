//! Reinforced continual learning engine.
//!
//! Learns a sequence of classification tasks by expanding a frozen,
//! timestamped task network. An LSTM controller trained with actor-critic
//! REINFORCE decides how many units to add per layer for each new task,
//! trading validation accuracy against model complexity.

pub mod error;
pub mod expandable;
pub mod layers;
pub mod numeric;

pub use error::{Error, Result};
