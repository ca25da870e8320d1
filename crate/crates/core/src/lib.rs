//! Continual-learning poisoning laboratory.
//!
//! * [`autodiff`]: tensors and a reverse-mode tape that can differentiate
//!   through its own backward pass.
//! * [`data`]: MNIST IDX ingestion and the permuted / split task sequences.
//! * [`models`]: the MLP victim classifier and the bounded-noise attack model.
//! * [`learners`]: EWC, SI and the SGD baseline.
//! * [`attack`]: the task-specific poisoning attack (trajectory recording,
//!   pseudo-update differentiation, distillation constraint).
//! * [`harness`]: experiment configuration, runs, metrics and reports.

pub mod attack;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;
pub mod learners;
pub mod models;
pub mod optim;
pub mod params;
pub mod rng;

pub use error::{Error, Result};
