//! Extraction and evaluation of token-level attribution scores.
//!
//! - [`shapley`]: Shapley Value Sampling against any black-box [`scorer`],
//!   with an exact brute-force counterpart.
//! - [`plausibility`]: average precision against human rationales.
//! - [`faithfulness`]: normalised area under the saliency-masking curve.
//! - [`stats`]: Kruskal-Wallis and Dunn tests.
//! - [`harness`]: declarative sweeps over models, methods, training sizes
//!   and seeds, with resumable per-run records and summary tables.

pub mod data;
pub mod faithfulness;
pub mod harness;
pub mod plausibility;
pub mod rng;
pub mod scorer;
pub mod shapley;
pub mod stats;
pub mod synth;
