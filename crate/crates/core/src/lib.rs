//! Concept bottleneck models: networks that predict human-specified concepts
//! `ĉ = g(x)` and then the target `ŷ = f(ĉ)` from those concepts alone.
//!
//! Modules, bottom up:
//!
//! - [`numerics`]: matrices, seeded sampling, least squares, gradient checks.
//! - [`data`]: datasets, synthetic generators, concept processing, CSV.
//! - [`models`]: feed-forward networks and the bottleneck/standard/multitask models.
//! - [`training`]: losses, optimizers and the five training regimes.
//! - [`intervention`]: test-time concept edits and intervention curves.
//! - [`probes`]: post-hoc linear probes on hidden activations.
//! - [`theory`]: closed-form risks in the linear-Gaussian model and their Monte Carlo check.

pub mod data;
pub mod error;
pub mod intervention;
pub mod models;
pub mod numerics;
pub mod probes;
pub mod theory;
pub mod training;

pub use error::{CbmError, Result};
