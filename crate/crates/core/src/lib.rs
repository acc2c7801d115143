//! Reconstruction-free model-based reinforcement learning: a categorical
//! recurrent state-space model trained by predicting rewards, continuation,
//! values and actions, with an actor-critic learned in imagination.

pub mod agent;
pub mod behavior;
pub mod checkpoint;
pub mod config;
pub mod distributions;
mod error;
pub mod nn;
pub mod optim;
pub mod replay;
pub mod world_model;

pub use error::{Error, Result};
