//! Cross-domain time series forecasting with one shared model.
//!
//! A single causal transformer serves several forecasting domains at once,
//! despite their differing channel counts, lookback lengths, and horizons.
//! Each univariate series is masked, stationarized, patched into tokens, and
//! gated against a mask-indicator embedding; a fixed natural-language
//! instruction identifying the domain is prepended so the backbone can tell
//! domains apart. A lightweight transformer over a pad-completed sequence
//! feeds flatten-linear heads that always emit the maximum horizon, truncated
//! per domain.
//!
//! The crate is self-contained: it ships its own f64 tensor engine with
//! reverse-mode differentiation, an AdamW optimizer, a multi-domain batch
//! sampler with temperature oversampling, synthetic data generators, and a
//! zero-shot instruction-selection protocol. See `examples/` for runnable
//! walkthroughs of each capability and `src/main.rs` for the `unitime` CLI.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod synth;
pub mod text;
pub mod training;



pub use config::RunConfig;
pub use data::{Batch, DomainSpec, DomainSplit, SeriesWindow};
pub use error::{Error, Result};
pub use model::{ModelConfig, ModelParams};

pub use numerics::{AdamW, AdamWConfig, Tape, Tensor, Var};
