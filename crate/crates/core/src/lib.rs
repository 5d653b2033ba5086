//! Training library for leaky-ReLU networks with an ℓ2,1 group-sparse
//! regularizer. The main solver reformulates the training problem with
//! per-layer auxiliary variables, penalizes the activation coupling, and
//! drives the resulting model with an inexact augmented Lagrangian method
//! whose subproblems are solved by alternating minimization. SGD-family
//! baselines, dataset generation/loading, and the evaluation metrics used to
//! compare solvers live alongside it.

pub mod baselines;
pub mod datasets;
pub mod error;
pub mod inner;
pub mod metrics;
pub mod outer;
pub mod linalg;
pub mod network;
pub mod penalty;
pub mod prox;
pub mod rng;

pub use error::{CoreError, Result};
