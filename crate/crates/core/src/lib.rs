//! Mixtures of sparse polynomial dynamical experts for snapshot data.
//!
//! Snapshot pairs `(x, dx/dt)` are explained by `K` expert flows
//! `f_k(x) = Z(x) Θ_k` over a monomial library `Z`, mixed either by a
//! constant distribution (fitted with EM in [`mode_local`]) or by a neural
//! gate `π(x)` (fitted by gradient descent in [`mode_global`]). Fitted models
//! can be rolled out as stochastic switching systems ([`rollout`]) and scored
//! with the metrics in [`eval`].

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod datagen;
pub mod dynlib;
mod linalg;
pub mod mode_global;
pub mod mode_local;
pub mod model_io;
pub mod error;
pub mod eval;
pub mod numfmt;
pub mod rng;
pub mod rollout;
pub mod scalar;

pub use dynlib::{ExpertParams, Normalization, PolyLibrary};
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Dataset64 = datagen::SnapshotDataset<f64>;
pub type Dataset32 = datagen::SnapshotDataset<f32>;
pub type LocalModel64 = mode_local::LocalModel<f64>;
pub type LocalModel32 = mode_local::LocalModel<f32>;
pub type GlobalModel64 = mode_global::GlobalModel<f64>;
pub type GlobalModel32 = mode_global::GlobalModel<f32>;
pub type Ensemble64 = mode_global::EnsembleModel<f64>;
pub type Ensemble32 = mode_global::EnsembleModel<f32>;
