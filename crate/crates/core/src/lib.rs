//! Diffusion policies with an auxiliary state-reconstruction head, trained by
//! behavior cloning on a 2D multimodal contextual bandit and evaluated on
//! out-of-distribution states with a grouped Chamfer distance.
//!
//! Layout:
//! - [`nn`]: dense networks with exact reverse-mode gradients and Adam.
//! - [`diffusion`]: noise schedules, forward noising and reverse steps.
//! - [`policy`]: shared encoder with diffusion and state heads, losses, sampling.
//! - [`critic`]: double critics, Bellman loss, soft target updates, Q-guidance.
//! - [`bandit`]: the contextual bandit and its datasets.
//! - [`metrics`]: Chamfer distance and grouped evaluation.
//! - [`harness`]: configs, seeded experiment runs, CSV/SVG output.

pub mod bandit;
pub mod checkpoint;
pub mod critic;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod policy;
pub mod rng;

pub use error::{Error, Result};
