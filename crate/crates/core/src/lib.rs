//! Generative-classifier intrusion detection for Controller Area Network traffic.
//!
//! The pipeline runs in five stages, each with its own module:
//!
//! 1. [`ingest`] parses CAN log files into [`frame::CanFrame`]s, splits them into
//!    train/test sets and draws class-balanced training subsets.
//! 2. [`features`] turns each frame into a fixed-length input vector (ID bits,
//!    normalized same-ID inter-arrival time, scaled payload bytes).
//! 3. [`nn`] is a small self-contained dense-network stack: forward/backward
//!    passes, diagonal-Gaussian heads with reparameterized sampling, and Adam.
//! 4. [`classifier`] is the detector itself: a class-conditional latent-variable
//!    model trained by maximizing an evidence lower bound and queried through
//!    importance-weighted class scores.
//! 5. [`eval`] computes confusion-matrix metrics overall and per attack class,
//!    while [`synth`] generates labeled synthetic bus traffic (periodic
//!    background plus DoS / fuzzy / spoofing injections) for repeatable
//!    experiments without a recorded dataset.
//!
//! All randomized operations take explicit seeds and are byte-reproducible.
//! With the `parallel` feature (on by default) batched training and prediction
//! fan out across threads via rayon; results are identical to the sequential
//! fallback because every reduction runs in a fixed order.

pub mod classifier;
pub mod eval;
pub mod features;
pub mod frame;
pub mod ingest;
pub mod nn;
pub mod synth;

pub use frame::{CanFrame, ClassLabel};
