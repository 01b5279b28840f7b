//! Deterministic desk-scale simulator of federated fine-tuning (FFT) over
//! heterogeneous, unreliable networks.
//!
//! The crate is organised around the stages of a federated round:
//!
//! - [`data`]: datasets, class distributions, and i.i.d. / label-skewed
//!   partitioning across a server-side public set and client private sets.
//! - [`network`]: per-client connection-failure processes (path-loss channel
//!   outages, intermittent multi-round disconnections) and the
//!   transmit-power/bandwidth resource optimizers.
//! - [`training`]: softmax classifiers, mini-batch SGD, proximal and
//!   control-variate local update rules.
//! - [`aggregation`]: aggregation-weight strategies (heuristic averaging, the
//!   adaptive compensatory pipeline, failure-aware baselines) and the model
//!   combination step.
//! - [`diagnostics`]: chi-square divergences, effective class distributions,
//!   and empirical heterogeneity estimates.
//! - [`experiment`]: experiment configuration, the round loop, RNG stream
//!   management, and metric persistence.
//!
//! Every run is a pure function of its configuration and master seed: all
//! randomness flows through counter-derived [`rng`] streams, so paired runs
//! of different strategies see identical connectivity realizations.

// Negated comparisons like `!(x > 0.0)` are NaN-rejecting guards; index
// loops mirror the matrix formulas they implement.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]
#![allow(clippy::manual_is_multiple_of)]

pub mod aggregation;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod network;
pub mod rng;
pub mod training;

pub use error::SimError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, SimError>;
