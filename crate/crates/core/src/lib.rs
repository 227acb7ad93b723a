//! Robustness evaluation for benchmarks built from continuous nuisance shifts.
//!
//! The crate covers the quantitative side of such a benchmark:
//!
//! * [`manifest`]: the JSONL manifest tying each generated image to its
//!   `(class, shift, scale, seed)` coordinates, and the per-seed scale
//!   trajectories derived from it.
//! * [`filter`]: the four-score out-of-class filter (two text alignments, two
//!   feature similarities against the unshifted image), threshold calibration on
//!   human labels and k-of-4 voting.
//! * [`metrics`]: per-scale accuracy, accuracy drops, corruption errors (CE and
//!   relative CE), failure points and their histograms.
//! * [`stats`]: binomial confidence intervals, interval-overlap ranking, linear
//!   fits with significance and partial correlation.
//! * [`slider`]: low-rank adapter algebra and a toy linear denoiser trained
//!   against the slider objective.
//! * [`report`] and [`cli`]: the `cns-eval` command line and its CSV/JSON/SVG
//!   artifacts.
//!
//! Data-parallel loops go through [`exec::Execution`]; with the default
//! `parallel` feature they run on rayon, otherwise sequentially.

pub mod cli;
pub mod error;
pub mod exec;
pub mod filter;
pub mod manifest;
pub mod metrics;
pub mod report;
pub mod slider;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
pub use exec::Execution;
pub use manifest::{load_manifest, ImageRecord, Manifest, Scale, TrajectoryIndex, TrajectoryKey};
