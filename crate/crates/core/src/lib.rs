//! Spline-parameterized cross-modal locomotion policies trained with PPO
//! under randomized observation delays, plus the simplified simulator they
//! are trained in.

pub mod diff;
pub mod kan;
pub mod perception;
pub mod spline;
pub mod policy;
pub mod envsim;
pub mod mmdr;
pub mod ppo;
pub mod config;
pub mod train;
pub mod eval;
pub mod analyze;
