//! Test-time adaptation for a micro VMamba-style classifier via traversal
//! permutations of the four-directional 2D scan.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] — f64 tensors with a reverse-mode differentiation tape
//! - [`ssm`] — the 1D state-space primitive (recurrence, ZOH discretization,
//!   convolution-kernel form, selective variant)
//! - [`scan2d`] — Cross-Scan / Cross-Merge over image patch grids and the 24
//!   traversal permutations routing directions to branch parameter slots
//! - [`model`] — the micro classifier, source training, checkpointing
//! - [`adapt`] — entropy-ranked permutation selection, pseudo-label
//!   adaptation of the SSM parameters, weight averaging, and baselines
//! - [`data`] — deterministic synthetic dataset and corruption suite
//! - [`runner`] — experiment driver, reports, and ablation sweeps

#![forbid(unsafe_code)]

pub mod adapt;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod model;
pub mod optim;
pub mod runner;
pub mod scan2d;
pub mod ssm;
pub mod tensor;

pub use error::{Error, Result};
