//! Self-supervised radio charting with matrix-exponential latent dynamics.
//!
//! The crate trains a world model over simulated channel state information
//! (CSI): an image-style encoder maps preprocessed CSI snapshots to latent
//! vectors, and a predictor advances latents through time conditioned on the
//! transmitter's planar motion. The flagship predictor is *homomorphic*: a
//! small network maps each action to a matrix-group element via the matrix
//! exponential, so multi-step prediction is a product of matrices applied to
//! the starting latent. Training is joint-embedding style (online encoder
//! chased by an EMA target encoder) with variance/covariance regularization
//! and an inverse-dynamics head; evaluation scores how faithfully latent
//! geometry mirrors physical geometry (trustworthiness, continuity, Kruskal
//! stress, Rajski distance).
//!
//! Module map:
//! * [`tensor`], [`linalg`], [`graph`], [`gradcheck`] — dense numerics:
//!   storage, matrix exponential and friends, reverse-mode autodiff, and
//!   finite-difference gradient verification.
//! * [`sim`], [`dataset`] — geometric multipath CSI simulator and the binary
//!   trajectory-dataset format.
//! * [`preprocess`] — delay-domain truncation, magnitude/phase planes, and
//!   tube masking.
//! * [`params`], [`encoder`], [`predictor`], [`model`] — named parameter
//!   storage, the encoder tower, the four predictor families, the
//!   inverse-dynamics head, and their assembly.
//! * [`losses`] — the five training losses and their weighted total.
//! * [`trainer`] — segment sampling, AdamW with schedules, EMA updates, and
//!   the training loop.
//! * [`chartmetrics`] — chart-quality metrics between latent and physical
//!   point sets.
//! * [`config`], [`checkpoint`], [`cli`] — run configuration, the binary
//!   checkpoint format, and the command-line entry points.

pub mod chartmetrics;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod params;
pub mod predictor;
pub mod preprocess;
pub mod rng;
pub mod sim;
mod cpx;
pub mod tensor;
pub mod trainer;
