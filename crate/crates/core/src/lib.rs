//! Beam selection for cell-free ISAC with digital-twin assisted offline DRL.
//!
//! The crate is layered bottom-up:
//!
//! - [`special`] and [`detect`]: chi-squared statistics, the joint GLRT and
//!   the CFAR-constrained detection probability.
//! - [`scenario`]: array geometry, DFT codebook, path loss and target motion.
//! - [`env`]: the beam-tracking MDP with potential-based reward shaping.
//! - [`nn`]: a small dense-network stack with hand-written backprop and Adam.
//! - [`agent`]: dueling double-Q learning with an optional conservative penalty.
//! - [`twin`]: a conditional GAN replica of the transition kernel.
//! - [`harness`]: baselines, experiment plans and interaction auditing.
//!
//! Monte-Carlo loops and batch evaluation go through [`par`], which uses rayon
//! when the `parallel` feature is enabled and falls back to plain iteration
//! otherwise. Results are identical in both modes.

pub mod agent;
pub mod detect;
pub mod env;
pub mod error;
pub mod harness;
pub mod nn;
pub mod par;
pub mod scenario;
pub mod special;
pub mod twin;

pub use error::{Error, Result};
