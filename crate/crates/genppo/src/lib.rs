//! Predicting a reinforcement-learning agent's generalization from its
//! policy-network weights, and training with that prediction in the loss.

pub mod check;
pub mod cli;
pub mod features;
pub mod forge;
pub mod grid;
pub mod harness;
pub mod nn;
pub mod ppo;
pub mod predictor;
pub mod rng;
