// SPDX-License-Identifier: MIT OR Apache-2.0

//! Ensemble change-point detection.
//!
//! A K-member ensemble scores each time step of a series with a value in
//! [0, 1]. The crate calibrates those scores, aggregates the K x T score
//! matrix into one detection statistic (pointwise mean/min/max/median, or a
//! sliding-window distance between consecutive blocks of the matrix),
//! thresholds it, and evaluates detections with margin-aware F1.

#![forbid(unsafe_code)]

pub mod aggregation;
pub mod calibration;
pub mod distances;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod io;
pub mod rng;
pub mod score_model;
pub mod scorers;
pub mod synthgen;

pub use aggregation::{Aggregation, AggregationFamily, Pointwise};
pub use distances::{Bandwidth, DistanceKind};
pub use error::{CpdError, Result};
pub use score_model::{DetectionResult, EnsembleScoreMatrix, LabeledSequence, ScoreSequence};
