//! Deterministic single-process simulator of tensor-decomposition-based
//! personalized federated learning.
//!
//! Clients alternately train a full-weight personalized model and a
//! CP-factorized local model under a bi-level objective; a server
//! aggregates factor matrices (or composed tensors) across rounds, with
//! full accounting of accuracy and communication volume.

pub mod aggregation;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kruskal;
pub mod layers;
pub mod model;
pub mod objective;
pub mod optim;
pub mod simulator;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
