//! Minimal deterministic reverse-mode automatic differentiation.
//!
//! Values live on a [`Tape`]; parameters are read from [`ParamStore`]s through
//! the [`ParamSource`] trait and gradients are routed back by [`ParamKey`].
//! Everything is generic over [`Scalar`] so the same layer code runs in `f32`
//! for training and in `f64` for finite-difference verification.

mod backward;
mod error;
pub mod nn;
mod ops;
mod optim;
mod param;
mod scalar;
mod tape;
mod tensor;

#[cfg(any(test, feature = "numcheck"))]
pub mod numcheck;

pub use error::{AutodiffError, Result};
pub use ops::cosine;
pub use optim::{Adam, AdamConfig};
pub use param::{Gradients, ParamKey, ParamSource, ParamStore, Parameter, StoreId};
pub use scalar::Scalar;
pub use tape::{BatchStats, BnMode, PoolMode, Tape, Var};
pub use tensor::Tensor;

/// Batch-norm and layer-norm stabiliser.
pub const NORM_EPS: f64 = 1e-5;
/// Running-statistics momentum for batch norm.
pub const BN_MOMENTUM: f64 = 0.1;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type Adam32 = Adam<f32>;
