//! Forecasting workbench for studying how lookback-window length drives
//! Transformer forecast error on stochastic time series.
//!
//! The crate bundles three forecasters (an encoder-decoder Transformer, a
//! channel-independent patch Transformer, and a retrieval-augmented patch
//! forecaster), a deterministic CPU training loop, exact top-k cosine
//! retrieval, attention-entropy diagnostics, and a benchmark harness that
//! runs experiment matrices and emits CSV/JSON/SVG reports.

pub mod error;
pub mod numerics;

pub use error::{Error, Result};
