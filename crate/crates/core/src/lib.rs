//! Semi-supervised variational soft-sensor engine.
//!
//! The crate builds up from a small reverse-mode autodiff tape to the full
//! training stack used by the `ssvaer` binary:
//!
//! - [`autodiff`]: dense tensors on a tape, backward sweep, gradient checking.
//! - [`nn`]: fully connected blocks with seeded Glorot initialization.
//! - [`variational`]: closed-form diagonal-Gaussian quantities (KL, entropy,
//!   NLL) and reparameterized sampling.
//! - [`models`]: the semi-supervised and supervised variational regressors
//!   plus the plain feed-forward baseline, with their loss terms.
//! - [`optim`]: Adam and the warmup + cosine-annealing schedule.
//! - [`dataset`]: delimited-file ingestion, lag features, standardization,
//!   label masking, consecutive-row pairing.
//! - [`harness`]: training loop, checkpointing, RMSE evaluation, confidence
//!   intervals, label-fraction sweeps, latent export.
//! - [`config`]: experiment configuration and its flat key-value file format.
//! - [`cli`]: the command-line front end.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod models;
pub mod nn;
pub mod optim;
pub mod variational;

pub use autodiff::{check_gradients, Graph, Param, Tensor};
pub use error::{Error, Result};
