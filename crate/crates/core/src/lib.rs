//! Reward-driven agent relevance.
//!
//! A relevance model scores every agent in a driving scene; only the top-k
//! agents are shown to a frozen driving policy. The scoring policy is trained
//! by reinforcement learning in closed loop with that driving policy and a
//! 2D simulator, and evaluated against closest-k, random-k and leave-one-out
//! attribution selectors.

pub mod baselines;
pub mod driving;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod model;
pub mod rng;
pub mod scenario;
pub mod scene;
pub mod selection;
pub mod sim;
pub mod trainer;

pub use error::{RdarError, Result};
