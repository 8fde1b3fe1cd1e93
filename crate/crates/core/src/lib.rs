//! Delay-aware planning by state-action trajectory inpainting.
//!
//! A denoising diffusion model generates fixed-length windows of
//! `(state, action)` rows. Under observation delay the stale observation and
//! the actions executed since then are clamped into the window, and the
//! model fills in the current state and future actions. Candidate windows
//! are ranked with an expectile-regression value function and the action at
//! the current-step row is executed, re-planning every step.

// `!(x > 0.0)` is used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod container;
pub mod datagen;
pub mod denoiser;
pub mod diffusion;
pub mod envs;
pub mod error;
pub mod experiment;
pub mod numerics;
pub mod planner;
pub mod rng;
pub mod stats;
pub mod value;

pub use error::{Error, Result};
