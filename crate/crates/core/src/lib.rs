//! Research engine for a clustered multi-agent portfolio strategy.
//!
//! The pipeline ingests per-symbol OHLCV series, derives a fixed panel of 25
//! technical indicators, summarizes each stock into a feature vector, embeds
//! the universe into the plane with t-SNE, groups stocks with DBSCAN, trains
//! one actor-critic trading agent per cluster, trains a deterministic
//! policy-gradient hedger that allocates capital across clusters, and
//! evaluates the combined strategy against classical online
//! portfolio-selection baselines under a commission-aware wealth model.
//!
//! The crate is `no_std` + `alloc`: every stage is pure, seeded computation.
//! File formats, configuration, and the command-line harness live in the
//! companion `cadport-cli` crate.

#![cfg_attr(not(test), no_std)]
// `!(x > 0.0)` rejects NaN along with the out-of-range values; the
// suggested `x <= 0.0` does not. Index loops are kept where the same
// index addresses several arrays at once.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod a3c;
pub mod backtest;
pub mod baselines;
pub mod dbscan;
pub mod diffcomp;
pub mod error;
pub mod hedge;
pub mod linalg;
pub mod market;
pub mod math;
pub mod metrics;
pub mod rng;
pub mod synth;
pub mod trading;
pub mod tsne;

pub use error::{Error, Result};
