//! Reinforcement-guided frame-subset selection.
//!
//! An autoregressive scorer picks `T'` distinct frames out of a `T`-frame
//! episode, a reward oracle grades each picked subset by the margin between
//! the correct answer and the strongest distractor, and the scorer is trained
//! with group-relative advantages plus an entropy bonus. Around that loop sit
//! the reward-variance data filter and the behavioural analysis suite.
//!
//! Module map:
//! - [`synthenv`]: synthetic episodes and the deterministic reward oracle
//! - [`reward`]: margin reward, group advantages, reward variance
//! - [`policy`]: the selection scorer, sampling, exact gradients, checkpoints
//! - [`trainer`]: the outer/inner optimisation loop and AdamW
//! - [`filterpipe`]: window/complement probing and variance filtering
//! - [`analysis`]: selection PDFs, divergences, k-NN entropy, needle sweeps, likelihood bins
//! - [`rewardsvc`]: HTTP scoring client and an in-process mock server
//! - [`cli`]: the `refocus` executable

pub mod analysis;
pub mod cli;
pub mod error;
pub mod filterpipe;
pub mod policy;
pub mod reward;
pub mod rewardsvc;
pub mod rng;
pub mod synthenv;
pub mod trainer;

pub use error::{Error, Result};
