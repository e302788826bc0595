//! Blind planar navigation with a diffusion action-plan policy and a bounded
//! memory of past contacts.
//!
//! The pipeline is: a scripted (or teleoperated) demonstrator drives a disc
//! end-effector through randomized obstacle scenes in [`sim2d`] while the
//! [`keypoints`] manager records informative contacts; [`data`] turns the
//! demonstrations into conditioning/plan pairs; [`diffusion`] trains a
//! noise-prediction network on them; [`controller`] runs it receding-horizon
//! style; [`eval`] benchmarks variants on fixed layouts.

pub mod controller;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod keypoints;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod seed;
pub mod session;
pub mod sim2d;

pub use error::{Error, Result};
