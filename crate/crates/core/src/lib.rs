//! Learned object placement.
//!
//! Given a background, a foreground and its mask, the model predicts a
//! placement `t = [scale, x, y]` that pastes the foreground into the scene.
//! The crate provides the differentiable placement geometry, a small
//! reverse-mode autodiff engine, the graph-completion generator, the
//! adversarial/variational dual-path trainer, a synthetic placement world with
//! a rule-based plausibility oracle, and the evaluation metrics.

pub mod config;
pub mod diffcore;
pub mod dualpath;
pub mod error;
pub mod eval;
pub mod gcm;
pub mod geometry;
pub mod imageio;
pub mod selfcheck;
pub mod synthdata;

pub use error::{Error, Result};
