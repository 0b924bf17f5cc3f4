//! Probabilistic point-cloud auto-encoders.
//!
//! The crate bundles everything needed to train point-net style
//! auto-encoders on point clouds and to use their reconstructions for
//! unsupervised shape-anomaly detection:
//!
//! * [`tensor`]: dense `f64` tensors with a tape-based reverse-mode graph,
//! * [`geometry`]: point clouds, nearest-neighbour search, Chamfer-type
//!   reconstruction losses and the reconstruction log-likelihood,
//! * [`models`]: the AE, σ-AE, VAE and σ-VAE networks and checkpoints,
//! * [`training`]: Adam, KL annealing and the training loop,
//! * [`anomaly`]: scoring, threshold fitting and P/R/F1/ROC-AUC,
//! * [`synthdata`]: a deterministic generator of vertebra-like clouds,
//! * [`gradcheck`]: the finite-difference gradient suite.

// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anomaly;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod models;
pub mod seed;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
