//! Shortcut-learning mitigation with a self-calibrated source model and a
//! self-improved target model.
//!
//! The crate is organised bottom-up:
//!
//! * [`synthdata`] generates image and token datasets with independently
//!   controllable spurious cues and the out-of-distribution variants that
//!   break them.
//! * [`model`] is a small pre-norm transformer encoder with hand-written
//!   backpropagation that exposes every attention matrix.
//! * [`losses`] holds the calibration, distillation, label and attention
//!   alignment objectives together with their gradients.
//! * [`calibration`] fits and applies per-class logistic (Platt) scaling.
//! * [`metrics`] computes accuracy and expected calibration error.
//! * [`training`] runs the ERM baseline, the source/target pipeline and the
//!   multi-shortcut investigation.
//! * [`cli`] wires everything to on-disk artifacts.

pub mod calibration;
pub mod cli;
pub mod config;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod real;
pub mod synthdata;
pub mod training;
mod hashing;

pub use error::{MimuError, Result};
pub use real::Real;
