//! Multi-task imitation-learned driving coach.
//!
//! The crate covers the whole offline and online pipeline: synthetic
//! teaching-data generators for an urban merge task and a track-driving task,
//! a small reverse-mode neural-network core, the scenario-sequence model with
//! teacher-action, trajectory and skill heads, the multi-task losses and
//! metrics, training with early stopping and checkpoints, and the online cue
//! policy used by the serving front end.

pub mod checkpoint;
pub mod dataset;
pub mod datagen;
pub mod error;
pub mod geom;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod raceline;
pub mod rng;
pub mod serve;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
