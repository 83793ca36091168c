//! Model transfer reinforcement learning by maximum-likelihood mixing of
//! known source MDP models.
//!
//! Stage 1 fits mixture weights on the probability simplex to the observed
//! target data; Stage 2 plans in the mixed model with value iteration
//! (tabular) or Riccati iteration (LQR). See [`transfer`] for the
//! interaction loop and its hierarchical variant.

// `!(x > 0.0)` is used on purpose: it rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod baselines;
pub mod envs;
pub mod error;
pub mod experiment;
pub mod likelihood;
pub mod mdp;
pub mod planning;
pub mod seeding;
pub mod simplex;
pub mod transfer;

pub use error::{Error, Result};
pub use mdp::{mix_lqr, mix_tabular, LqrModel, MixtureWeights, SourceSet, TabularMdp};
