//! Learn a generative model of a dynamic attributed directed graph from an
//! observed snapshot sequence, synthesize new sequences from it, and score
//! how closely generated sequences match the original's structural and
//! attribute statistics.
//!
//! The pipeline: [`graph`] ingests timestamped edge lists into snapshot
//! sequences; [`encoder`] embeds each snapshot with bidirectional message
//! passing; [`latent`] samples per-node latent variables from conditional
//! Gaussians; [`decoder`] emits adjacency via a Bernoulli mixture and
//! attributes via attention over the generated structure; [`recurrence`]
//! carries per-node hidden state across timesteps; [`training`] fits all
//! parameters jointly against the step-wise evidence lower bound;
//! [`generate`] runs the trained model autoregressively from scratch; and
//! [`metrics`] holds the evaluation suite.

pub mod autodiff;
pub mod error;

pub use error::{Error, Result};
