//! Toy latent video diffusion with reward-driven identity adapters.

pub mod adapter;
pub mod artifacts;
pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod prompts;
pub mod rewards;
pub mod rng;
pub mod sampler;
pub mod scenario;
pub mod schedule;
pub mod text;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
