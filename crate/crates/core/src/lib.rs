//! Multi-task offline reinforcement learning for budget-constrained
//! multi-channel advertising.
//!
//! The crate learns a channel-recommendation policy and a reward model from
//! logged user journeys, then drives a budgeted exploration/exploitation
//! procedure with channel-level and user-level allocation.

// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocation;
pub mod data;
mod error;
pub mod model;
pub mod numerics;
pub mod simulator;
pub mod training;

pub use error::{Error, Result};
