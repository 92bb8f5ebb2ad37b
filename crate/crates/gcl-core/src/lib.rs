//! Analytic expert routing and temporal-ensemble experts for general
//! continual learning over single-pass, blurry-boundary streams.
//!
//! The crate is `no_std` (it needs `alloc`). Everything touching the file
//! system, the command line or wall-clock time lives in `gcl-harness`.
//!
//! Module map:
//!
//! - [`expansion`] and [`router`]: fixed random ReLU expansion, streaming
//!   Gram/prototype statistics and the closed-form ridge router.
//! - [`experts`]: affine feature adapters, the shared online head, masked
//!   cross-entropy training and per-expert EMA head banks.
//! - [`ensemble`]: inference-time aggregation over the online and EMA heads.
//! - [`stream`]: blurry stream construction and frozen-feature sources.
//! - [`baselines`]: alternative routers and the evaluation-only oracle.
//! - [`metrics`]: session-matrix metrics, anytime accuracy, routing accuracy
//!   and linear CKA.
//! - [`engine`]: the per-seed train/evaluate loop tying it all together.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod baselines;
pub mod engine;
pub mod ensemble;
pub mod error;
pub mod expansion;
pub mod experts;
pub mod linalg;
pub mod metrics;
pub mod rng;
pub mod router;
pub mod stream;

pub use error::{Error, Result};
pub use linalg::Matrix;
