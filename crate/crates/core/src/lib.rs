//! Differentially private continual learning.
//!
//! The crate trains a dense classifier over a stream of tasks using
//! averaged gradient episodic memory (A-GEM) projection, optionally with
//! per-example clipping and Gaussian noise on both the task gradient and the
//! reference gradient. Reference gradients come either from a single randomly
//! chosen mini-memory block per step ([`trainer::Mode::DpCl`]) or from every
//! stored block ([`trainer::Mode::DpAgem`]). A moments accountant tracks the
//! privacy spent per task and per memory block, and the two continual
//! composition policies turn those into per-task and cumulative budgets.
//!
//! Module map:
//!
//! - [`nn`]: dense network, cross-entropy loss, exact backprop.
//! - [`dp`]: gradient clipping and addressed Gaussian noise streams.
//! - [`memory`]: episodic memory of per-task mini-memory blocks.
//! - [`accountant`]: subsampled Gaussian log-moments, tail bound, composition.
//! - [`trainer`]: projection and the training loops.
//! - [`data`]: archive loading, permuted task streams, synthetic data.
//! - [`metrics`]: average accuracy, forgetting, learning-curve area.
//! - [`cli`]: run specifications, experiment runner, CSV outputs.

pub mod accountant;
pub mod cli;
pub mod data;
pub mod dp;
pub mod error;
pub mod memory;
pub mod metrics;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
