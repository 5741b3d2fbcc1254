//! Unified locomotion transformer: a single causally masked transformer that
//! jointly optimizes a privilege-informed teacher policy and a
//! proprioception-only student policy with PPO, next state-action prediction
//! and action imitation, on a toy velocity-tracking environment.

pub mod baselines;
pub mod cli;
pub mod config;
pub mod env;
pub mod error;
pub mod eval;
pub mod losses;
pub mod mixer;
pub mod trainer;
pub mod net;
pub mod rollout;
pub mod suites;
