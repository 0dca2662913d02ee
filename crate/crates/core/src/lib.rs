//! Clipped KL-regularised RLHF objectives on finite prompt/response worlds.
//!
//! The crate builds tabular worlds, evaluates exact and sampled objectives
//! with a clipped log-ratio penalty, computes the concentration, shift and
//! clipping bounds on their gap, calibrates the clipping threshold and the
//! rollouts-per-prompt allocation, and runs seeded coverage campaigns that
//! check the bounds empirically.

pub mod bounds;
pub mod calibration;
pub mod campaign;
pub mod config;
pub mod divergences;
pub mod error;
pub mod objectives;
pub mod sampling;
pub mod world;

pub use error::{LabError, Result};
pub use objectives::ClipPenaltySpec;
pub use sampling::SampleBudget;
pub use world::{Policy, RewardModel, Table, TabularWorld};
