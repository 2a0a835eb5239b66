//! Reinforcement learning from unit-test feedback for code synthesis.
//!
//! A policy proposes function bodies, a sandbox runs them against unit tests,
//! and the pass fraction becomes the reward for a critic-baselined REINFORCE
//! update. A replay buffer of canonicalized correct solutions supplies
//! positive examples for problems the policy has not solved recently.

pub mod augment;
pub mod buffer;
pub mod canon;
pub mod critic;
pub mod dataset;
pub mod evaluator;
pub mod error;
pub mod policy;
pub mod reward;
pub mod sandbox;
pub mod toy;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
