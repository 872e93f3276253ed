//! Risk-sensitive (CVaR) reinforcement learning in low-rank episodic MDPs.
//!
//! The crate provides the building blocks of an exploration loop that learns
//! transition features by maximum likelihood, plans over an augmented
//! (state, budget) space with optimistic bonuses, and evaluates the CVaR of
//! the resulting policies against exact brute-force oracles.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod driver;
pub mod env;
pub mod error;
pub mod explore;
pub mod learn;
pub mod lsvi;
pub mod plan_exact;
pub mod props;
pub mod risk;
pub mod rng;

pub use error::{Error, Result};
