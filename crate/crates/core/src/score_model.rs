// SPDX-License-Identifier: MIT OR Apache-2.0

//! Core value types: per-model score streams, ensemble score matrices,
//! ground-truth labels and detection results.
//!
//! Time indices are 0-based everywhere in code and in every file format.

use serde::{Deserialize, Serialize};

use crate::error::{CpdError, Result};

/// One model's change-point scores for one series, every value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ScoreSequence(Vec<f64>);

impl ScoreSequence {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(CpdError::domain("score sequence must have length >= 1"));
        }
        if let Some((idx, v)) = scores.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(CpdError::domain(format!(
                "score at index {idx} is {v}, outside [0, 1]"
            )));
        }
        Ok(Self(scores))
    }

    /// Builds a sequence from values already known to be in range.
    pub(crate) fn from_trusted(scores: Vec<f64>) -> Self {
        debug_assert!(!scores.is_empty());
        debug_assert!(scores.iter().all(|v| (0.0..=1.0).contains(v)));
        Self(scores)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl<'de> Deserialize<'de> for ScoreSequence {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        ScoreSequence::new(v).map_err(serde::de::Error::custom)
    }
}

impl AsRef<[f64]> for ScoreSequence {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Maps cosine-similarity scores in `[-1, 1]` onto change-point scores:
/// `1 - p` for non-negative `p`, and 0 for anti-correlated windows.
pub fn transform_unsupervised_scores(raw: &[f64]) -> Result<ScoreSequence> {
    let mut out = Vec::with_capacity(raw.len());
    for (idx, &p) in raw.iter().enumerate() {
        if !(-1.0..=1.0).contains(&p) {
            return Err(CpdError::domain(format!(
                "unsupervised score at index {idx} is {p}, outside [-1, 1]"
            )));
        }
        out.push(transform_unsupervised_value(p));
    }
    ScoreSequence::new(out)
}

#[inline]
pub(crate) fn transform_unsupervised_value(p: f64) -> f64 {
    if p >= 0.0 {
        1.0 - p
    } else {
        0.0
    }
}

/// K score sequences of a common length T, one per ensemble member.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleScoreMatrix {
    rows: Vec<ScoreSequence>,
    model_ids: Vec<String>,
}

impl EnsembleScoreMatrix {
    /// Validates and wraps rows, naming members `m0, m1, ...`.
    pub fn new(rows: Vec<ScoreSequence>) -> Result<Self> {
        let ids = (0..rows.len()).map(|k| format!("m{k}")).collect();
        Self::with_ids(rows, ids)
    }

    pub fn with_ids(rows: Vec<ScoreSequence>, model_ids: Vec<String>) -> Result<Self> {
        if rows.is_empty() {
            return Err(CpdError::shape("ensemble score matrix needs at least one row"));
        }
        if model_ids.len() != rows.len() {
            return Err(CpdError::shape(format!(
                "{} model ids for {} rows",
                model_ids.len(),
                rows.len()
            )));
        }
        let t = rows[0].len();
        if let Some((k, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != t) {
            return Err(CpdError::shape(format!(
                "row {k} has length {}, expected {t}",
                row.len()
            )));
        }
        Ok(Self { rows, model_ids })
    }

    /// Number of ensemble members K.
    pub fn n_models(&self) -> usize {
        self.rows.len()
    }

    /// Series length T.
    pub fn len(&self) -> usize {
        self.rows[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn rows(&self) -> &[ScoreSequence] {
        &self.rows
    }

    pub fn row(&self, k: usize) -> &ScoreSequence {
        &self.rows[k]
    }

    pub fn model_ids(&self) -> &[String] {
        &self.model_ids
    }

    #[inline]
    pub fn get(&self, k: usize, t: usize) -> f64 {
        self.rows[k].0[t]
    }

    /// Copies column `t` (one value per model) into `buf`.
    pub fn column_into(&self, t: usize, buf: &mut Vec<f64>) {
        buf.clear();
        buf.extend(self.rows.iter().map(|r| r.0[t]));
    }

    /// Applies `f` to every row, keeping ids.
    pub fn map_rows<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, &ScoreSequence) -> Result<ScoreSequence>,
    {
        let rows = self
            .rows
            .iter()
            .enumerate()
            .map(|(k, r)| f(k, r))
            .collect::<Result<Vec<_>>>()?;
        Self::with_ids(rows, self.model_ids.clone())
    }

    pub fn into_parts(self) -> (Vec<ScoreSequence>, Vec<String>) {
        (self.rows, self.model_ids)
    }
}

/// Validates raw rows into a matrix. Out-of-range entries are domain errors
/// naming the offending row and column, ragged rows are shape errors.
pub fn validate_matrix(rows: Vec<Vec<f64>>) -> Result<EnsembleScoreMatrix> {
    let mut seqs = Vec::with_capacity(rows.len());
    for (k, row) in rows.into_iter().enumerate() {
        if let Some((col, v)) = row.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(CpdError::domain(format!(
                "row {k} col {col}: score {v} is outside [0, 1]"
            )));
        }
        seqs.push(ScoreSequence::new(row)?);
    }
    EnsembleScoreMatrix::new(seqs)
}

/// Ground truth for one sequence under the at-most-one-change assumption.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSequence {
    change_point: Option<usize>,
    length: usize,
}

impl LabeledSequence {
    pub fn new(change_point: Option<usize>, length: usize) -> Result<Self> {
        if length == 0 {
            return Err(CpdError::domain("sequence length must be >= 1"));
        }
        if let Some(theta) = change_point {
            if theta >= length {
                return Err(CpdError::domain(format!(
                    "change point {theta} outside sequence of length {length}"
                )));
            }
        }
        Ok(Self { change_point, length })
    }

    pub fn no_change(length: usize) -> Result<Self> {
        Self::new(None, length)
    }

    pub fn change_point(&self) -> Option<usize> {
        self.change_point
    }

    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    pub fn has_change(&self) -> bool {
        self.change_point.is_some()
    }

    /// Per-step label: 1 at and after the change point, 0 before it.
    pub fn label_at(&self, t: usize) -> u8 {
        match self.change_point {
            Some(theta) if t >= theta => 1,
            _ => 0,
        }
    }

    pub fn labels(&self) -> Vec<u8> {
        (0..self.length).map(|t| self.label_at(t)).collect()
    }
}

/// Outcome of thresholding an aggregated statistic.
///
/// When nothing fires, `tau` is `T - 1` (the last index) and `detected` is
/// false; the flag keeps that case apart from a genuine alarm at the last step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    tau: usize,
    trace: Vec<f64>,
    threshold: f64,
    detected: bool,
}

impl DetectionResult {
    /// Scans `trace` for the first value `>= threshold`.
    pub fn from_trace(trace: Vec<f64>, threshold: f64) -> Result<Self> {
        if trace.is_empty() {
            return Err(CpdError::domain("cannot detect on an empty trace"));
        }
        let first = trace.iter().position(|&w| w >= threshold);
        let (tau, detected) = match first {
            Some(t) => (t, true),
            None => (trace.len() - 1, false),
        };
        Ok(Self {
            tau,
            trace,
            threshold,
            detected,
        })
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    /// Alarm time if an alarm fired.
    pub fn alarm(&self) -> Option<usize> {
        self.detected.then_some(self.tau)
    }

    pub fn trace(&self) -> &[f64] {
        &self.trace
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn detected(&self) -> bool {
        self.detected
    }

    pub fn len(&self) -> usize {
        self.trace.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trace.is_empty()
    }
}
