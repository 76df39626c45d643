//! Desk-scale engine for MoE-enhanced multi-level V2X cooperation.
//!
//! The crate is layered bottom-up:
//!
//! * [`numerics`] dense f64 matrices, a reverse-mode tape, perceptron and
//!   attention blocks, and a finite-difference gradient checker.
//! * [`geometry`] SE(2) frames, point sets and BEV occupancy grids.
//! * [`moe`] sparse top-k mixture-of-experts with a variance balance loss.
//! * [`model`] the per-agent query pipeline, planner and joint loss.
//! * [`fusion`] track, map, occupancy and trajectory fusion operators.
//! * [`comm`] the V2X wire format, byte accounting and budgeted channel.
//! * [`metrics`] assignment, detection, tracking, map, motion and planning
//!   metrics.
//! * [`harness`] synthetic scenarios, the cooperative runner, ablations,
//!   bandwidth sweeps and the training smoke loop.

pub mod comm;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod numerics;

pub use error::{Error, Result};
