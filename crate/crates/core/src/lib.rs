//! Desk-scale simulator of federated fine-tuning with frozen backbones
//! and low-rank adapters, where each client trains a personalized
//! adapter regularized toward the features of a FedAvg-aggregated
//! global adapter.
//!
//! The crate is organized along the pipeline:
//!
//! * [`matrix`] / [`nn`] — dense numeric core: frozen encoder, fixed
//!   head, adapter factors, hand-derived backward pass, and
//!   finite-difference verification;
//! * [`reg`] — feature-distance functions and gradients;
//! * [`data`] — synthetic environments with an invariant labeling rule
//!   and environment-specific spurious features;
//! * [`fed`] — the communication-round state machine, baselines, and
//!   step-size bounds;
//! * [`metrics`] — risks, OOD objectives, feature distances, and
//!   estimates of the convergence constants;
//! * [`report`] — JSON/CSV artifacts.

pub mod data;
pub mod error;
pub mod fed;
pub mod fixtures;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod reg;
pub mod report;
pub mod rng;

pub use error::{Error, Result};
