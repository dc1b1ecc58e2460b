//! Constrained joint estimation for fusing randomized and observational data.
//!
//! An outcome model `m(phi(x), t)` is fitted on observational rows while the
//! randomized rows enforce the moment restriction
//! `E_r[(1{T = k} - p_k)(Y - m(phi(X), T))] = 0` for every non-reference arm.
//! Training alternates an overlap critic step, a primal step on the augmented
//! Lagrangian and a projected dual ascent step.
//!
//! Network, moment, kernel and metric kernels are generic over [`Scalar`]
//! (`f32` or `f64`); datasets, training loops and the linear-quadratic theory
//! suites use `f64`.

pub mod datagen;
pub mod diffmodels;
pub mod discrepancy;
pub mod error;
pub mod estimators;
pub mod feasibility;
pub mod harness;
pub mod metrics;
pub mod moments;
pub mod scalar;

pub use error::{FusionError, Result};
pub use scalar::Scalar;

/// Default working precision.
pub type Real = f64;

pub type Mlp = diffmodels::Mlp<Real>;
pub type Params = diffmodels::ParamVector<Real>;
pub type Representation = diffmodels::RepresentationNet<Real>;
pub type Predictor = diffmodels::PredictorNet<Real>;
pub type Critic = diffmodels::CriticNet<Real>;
pub type Fusion = diffmodels::FusionModel<Real>;

pub type Mlp32 = diffmodels::Mlp<f32>;
pub type Representation32 = diffmodels::RepresentationNet<f32>;
pub type Predictor32 = diffmodels::PredictorNet<f32>;
pub type Critic32 = diffmodels::CriticNet<f32>;
