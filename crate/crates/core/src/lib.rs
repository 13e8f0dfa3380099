//! Synthetic vision-language task streams, modular fusion networks with
//! per-task module specialisation, continual-learning training schemes and
//! their evaluation metrics.
//!
//! Model and training code is generic over the scalar type; training uses
//! `f32` and gradient checks use `f64`.

pub mod analysis;
pub mod data;
pub mod error;
pub mod model;
pub mod rng;
pub mod specialization;
pub mod trainer;

pub use error::{LilacError, Result};

pub type VlModel32 = model::VlModel<f32>;
pub type ParameterBank32 = specialization::ParameterBank<f32>;
pub type Prepared32 = trainer::Prepared<f32>;
pub type Session32<'a> = trainer::Session<'a, f32>;
