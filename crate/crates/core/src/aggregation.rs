// SPDX-License-Identifier: MIT OR Apache-2.0

//! Ensemble aggregation: pointwise statistics across models, and the
//! sliding-window distance statistic.
//!
//! Window convention (0-based column indices): the statistic at step `t`
//! compares the history columns `[t - 2w, t - w)` with the future columns
//! `[t - w, t)`, each flattened across all K models into `w * K` values.
//! Steps `t < 2w` are 0. A step change at column `theta` is therefore fully
//! separated at `t = theta + w`, which is the inherent detection delay.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distances::DistanceKind;
use crate::error::{CpdError, Result};
use crate::score_model::{DetectionResult, EnsembleScoreMatrix, ScoreSequence};

/// Column-wise statistic across ensemble members.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pointwise {
    Mean,
    Min,
    Max,
    /// Even K uses the mean of the two central order statistics.
    Median,
}

impl Pointwise {
    pub const ALL: [Pointwise; 4] = [Pointwise::Mean, Pointwise::Min, Pointwise::Max, Pointwise::Median];

    /// Statistic of a column that is already sorted ascending.
    #[inline]
    fn of_sorted(self, col: &[f64]) -> f64 {
        let k = col.len();
        match self {
            Pointwise::Mean => col.iter().sum::<f64>() / k as f64,
            Pointwise::Min => col[0],
            Pointwise::Max => col[k - 1],
            Pointwise::Median => {
                if k % 2 == 1 {
                    col[k / 2]
                } else {
                    0.5 * (col[k / 2 - 1] + col[k / 2])
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Pointwise::Mean => "mean",
            Pointwise::Min => "min",
            Pointwise::Max => "max",
            Pointwise::Median => "median",
        }
    }
}

/// How an ensemble score matrix becomes a single statistic trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Aggregation {
    Pointwise { statistic: Pointwise },
    WindowDistance { window: usize, distance: DistanceKind },
}

impl Aggregation {
    pub fn mean() -> Self {
        Aggregation::Pointwise {
            statistic: Pointwise::Mean,
        }
    }

    pub fn window_w1(window: usize) -> Self {
        Aggregation::WindowDistance {
            window,
            distance: DistanceKind::W1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Aggregation::WindowDistance { window, distance } = self {
            if *window == 0 {
                return Err(CpdError::config("window size must be >= 1"));
            }
            distance.validate()?;
        }
        Ok(())
    }

    /// Whether traces from this aggregation are guaranteed to lie in `[0, 1]`.
    pub fn is_unit_bounded(&self) -> bool {
        match self {
            Aggregation::Pointwise { .. } => true,
            Aggregation::WindowDistance { distance, .. } => distance.is_unit_bounded(),
        }
    }

    /// Statistic trace for a matrix.
    pub fn trace(&self, matrix: &EnsembleScoreMatrix) -> Result<Vec<f64>> {
        match self {
            Aggregation::Pointwise { statistic } => Ok(aggregate_pointwise(matrix, *statistic).into_inner()),
            Aggregation::WindowDistance { window, distance } => {
                window_distance_trace(matrix, *window, distance)
            }
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Aggregation::Pointwise { statistic } => f.write_str(statistic.name()),
            Aggregation::WindowDistance { window, distance } => {
                write!(f, "window-{distance}-w{window}")
            }
        }
    }
}

/// Aggregation family as named on the command line, before a window size and
/// distance are attached.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationFamily {
    Mean,
    Min,
    Max,
    Median,
    #[serde(alias = "wwaggr", alias = "window-wasserstein")]
    WindowDistance,
}

impl AggregationFamily {
    pub const ALL: [AggregationFamily; 5] = [
        AggregationFamily::Mean,
        AggregationFamily::Min,
        AggregationFamily::Max,
        AggregationFamily::Median,
        AggregationFamily::WindowDistance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AggregationFamily::Mean => "mean",
            AggregationFamily::Min => "min",
            AggregationFamily::Max => "max",
            AggregationFamily::Median => "median",
            AggregationFamily::WindowDistance => "window_distance",
        }
    }

    pub fn with(self, window: usize, distance: DistanceKind) -> Aggregation {
        let statistic = match self {
            AggregationFamily::Mean => Pointwise::Mean,
            AggregationFamily::Min => Pointwise::Min,
            AggregationFamily::Max => Pointwise::Max,
            AggregationFamily::Median => Pointwise::Median,
            AggregationFamily::WindowDistance => return Aggregation::WindowDistance { window, distance },
        };
        Aggregation::Pointwise { statistic }
    }

    pub fn is_windowed(self) -> bool {
        self == AggregationFamily::WindowDistance
    }

    pub fn of(aggregation: &Aggregation) -> Self {
        match aggregation {
            Aggregation::Pointwise { statistic } => match statistic {
                Pointwise::Mean => AggregationFamily::Mean,
                Pointwise::Min => AggregationFamily::Min,
                Pointwise::Max => AggregationFamily::Max,
                Pointwise::Median => AggregationFamily::Median,
            },
            Aggregation::WindowDistance { .. } => AggregationFamily::WindowDistance,
        }
    }
}

impl FromStr for AggregationFamily {
    type Err = CpdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "mean" => Ok(Self::Mean),
            "min" => Ok(Self::Min),
            "max" => Ok(Self::Max),
            "median" => Ok(Self::Median),
            "window_distance" | "window_wasserstein" | "wwaggr" => Ok(Self::WindowDistance),
            other => Err(CpdError::config(format!("unknown aggregation {other:?}"))),
        }
    }
}

impl fmt::Display for AggregationFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// An aggregation together with its alarm threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatorConfig {
    pub aggregation: Aggregation,
    pub threshold: f64,
}

/// Insertion sort for the short columns of a score matrix. Scores are never
/// NaN; -0.0 is mapped to 0.0 first so that equal values are bitwise equal
/// and the result does not depend on input order.
fn sort_column(col: &mut [f64]) {
    for i in 0..col.len() {
        let x = col[i] + 0.0;
        let mut j = i;
        while j > 0 && x < col[j - 1] {
            col[j] = col[j - 1];
            j -= 1;
        }
        col[j] = x;
    }
}

/// Column-wise statistic over the K models at each step.
///
/// Each column is sorted before reduction, so the result does not depend on
/// row order, bit for bit.
pub fn aggregate_pointwise(matrix: &EnsembleScoreMatrix, statistic: Pointwise) -> ScoreSequence {
    let mut col = Vec::with_capacity(matrix.n_models());
    let out = (0..matrix.len())
        .map(|t| {
            matrix.column_into(t, &mut col);
            sort_column(&mut col);
            statistic.of_sorted(&col)
        })
        .collect();
    ScoreSequence::from_trusted(out)
}

/// Sliding-window distance trace between flattened history and future
/// windows of the ensemble matrix.
pub fn window_distance_trace(
    matrix: &EnsembleScoreMatrix,
    window: usize,
    distance: &DistanceKind,
) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(CpdError::config("window size must be >= 1"));
    }
    distance.validate()?;
    let t_len = matrix.len();
    let mut trace = vec![0.0; t_len];
    if t_len < 2 * window + 1 {
        log::warn!(
            "series of length {t_len} is shorter than 2 * {window} + 1; the window statistic is identically 0"
        );
        return Ok(trace);
    }
    let k = matrix.n_models();
    let n = window * k;
    let mut cols = vec![0.0; t_len * k];
    for (t, col) in cols.chunks_exact_mut(k).enumerate() {
        for (m, v) in col.iter_mut().enumerate() {
            *v = matrix.get(m, t);
        }
        sort_column(col);
    }
    // Window s holds the flattened, sorted columns [s, s + window) and is
    // built from window s - 1 by dropping column s - 1 and merging in column
    // s + window - 1. The statistic at t = s + window compares window s with
    // window s - window, so a ring of window + 1 sorted windows suffices.
    let slots = window + 1;
    let mut ring = vec![0.0; slots * n];
    let mut first: Vec<(f64, usize)> = (0..n).map(|i| (cols[i], i / k)).collect();
    first.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
    let mut slide = Slide::new(n, k);
    for (i, p) in first.iter().enumerate() {
        ring[i] = p.0;
        slide.tags[i] = p.1;
    }
    let mut scratch = Vec::new();
    for s in 0..t_len - window {
        if s > 0 {
            let entering = s + window - 1;
            slide.remove(&ring[((s - 1) % slots) * n..][..n], s - 1);
            slide.merge(
                &cols[entering * k..(entering + 1) * k],
                entering,
                &mut ring[(s % slots) * n..][..n],
            );
        }
        if s >= window {
            let fut = &ring[(s % slots) * n..][..n];
            let hist = &ring[((s - window) % slots) * n..][..n];
            trace[s + window] = distance.distance_sorted(fut, hist, &mut scratch);
        }
    }
    Ok(trace)
}

/// State for moving a sorted window one column forward. Each value carries
/// the index of the column it came from, so removal is a plain filter.
/// Both buffers are padded with a sentinel at each end.
struct Slide {
    /// Column of each value of the current window.
    tags: Vec<usize>,
    kept: Vec<f64>,
    kept_tags: Vec<usize>,
    entering: Vec<f64>,
}

impl Slide {
    fn new(n: usize, k: usize) -> Self {
        Self {
            tags: vec![0; n],
            kept: vec![0.0; n + 2],
            kept_tags: vec![0; n + 2],
            entering: vec![0.0; k + 2],
        }
    }

    /// Copies `window` without the values of column `leaving`.
    fn remove(&mut self, window: &[f64], leaving: usize) {
        let mut o = 1;
        for (&v, &tag) in window.iter().zip(&self.tags) {
            self.kept[o] = v;
            self.kept_tags[o] = tag;
            o += usize::from(tag != leaving);
        }
        self.kept[0] = f64::NEG_INFINITY;
        self.kept[o] = f64::INFINITY;
    }

    /// Merges the sorted `values` of column `column` into the kept values.
    /// Runs from both ends at once: the front takes kept values on ties and
    /// the back takes entering ones, so the two halves meet exactly.
    fn merge(&mut self, values: &[f64], column: usize, out: &mut [f64]) {
        let n = out.len();
        let kl = n - values.len();
        let ent = &mut self.entering;
        ent[0] = f64::NEG_INFINITY;
        ent[1..=values.len()].copy_from_slice(values);
        ent[values.len() + 1] = f64::INFINITY;
        let (kept, kept_tags, tags) = (&self.kept, &self.kept_tags, &mut self.tags);
        let (mut i, mut j) = (1, 1);
        let (mut ib, mut jb) = (kl, values.len());
        for f in 0..n / 2 {
            let (a, b) = (kept[i], ent[j]);
            let take_a = a <= b;
            out[f] = if take_a { a } else { b };
            tags[f] = if take_a { kept_tags[i] } else { column };
            i += usize::from(take_a);
            j += usize::from(!take_a);

            let (a, b) = (kept[ib], ent[jb]);
            let take_a = a > b;
            out[n - 1 - f] = if take_a { a } else { b };
            tags[n - 1 - f] = if take_a { kept_tags[ib] } else { column };
            ib -= usize::from(take_a);
            jb -= usize::from(!take_a);
        }
        if n % 2 == 1 {
            let (a, b) = (kept[i], ent[j]);
            let take_a = a <= b;
            out[n / 2] = if take_a { a } else { b };
            tags[n / 2] = if take_a { kept_tags[i] } else { column };
        }
    }
}

/// First step where the trace reaches the threshold.
pub fn detect(trace: &[f64], threshold: f64) -> Result<DetectionResult> {
    DetectionResult::from_trace(trace.to_vec(), threshold)
}

pub fn run_aggregator(matrix: &EnsembleScoreMatrix, config: &AggregatorConfig) -> Result<DetectionResult> {
    config.aggregation.validate()?;
    let trace = config.aggregation.trace(matrix)?;
    DetectionResult::from_trace(trace, config.threshold)
}

/// Online form of [`window_distance_trace`] for one stream: keeps the last
/// `2 * window` columns and emits the statistic for each new step.
#[derive(Clone, Debug)]
pub struct StreamingWindowAggregator {
    window: usize,
    n_models: usize,
    distance: DistanceKind,
    buffer: VecDeque<Vec<f64>>,
    steps: usize,
    hist: Vec<f64>,
    fut: Vec<f64>,
    scratch: Vec<f64>,
}

impl StreamingWindowAggregator {
    pub fn new(n_models: usize, window: usize, distance: DistanceKind) -> Result<Self> {
        if window == 0 {
            return Err(CpdError::config("window size must be >= 1"));
        }
        if n_models == 0 {
            return Err(CpdError::config("need at least one model"));
        }
        distance.validate()?;
        Ok(Self {
            window,
            n_models,
            distance,
            buffer: VecDeque::with_capacity(2 * window + 1),
            steps: 0,
            hist: Vec::with_capacity(window * n_models),
            fut: Vec::with_capacity(window * n_models),
            scratch: Vec::new(),
        })
    }

    /// Statistic for the incoming step, computed from the columns before it;
    /// then `column` (one score per model) joins the buffer.
    pub fn push(&mut self, column: &[f64]) -> Result<f64> {
        if column.len() != self.n_models {
            return Err(CpdError::shape(format!(
                "column has {} scores, expected {}",
                column.len(),
                self.n_models
            )));
        }
        if let Some(i) = column.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(CpdError::domain(format!(
                "score for model {i} at step {} is {}, outside [0, 1]",
                self.steps, column[i]
            )));
        }
        let w = if self.buffer.len() == 2 * self.window {
            self.hist.clear();
            self.fut.clear();
            for (j, col) in self.buffer.iter().enumerate() {
                if j < self.window {
                    self.hist.extend_from_slice(col);
                } else {
                    self.fut.extend_from_slice(col);
                }
            }
            self.hist.sort_unstable_by(f64::total_cmp);
            self.fut.sort_unstable_by(f64::total_cmp);
            self.distance
                .distance_sorted(&self.fut, &self.hist, &mut self.scratch)
        } else {
            0.0
        };
        let mut col = if self.buffer.len() == 2 * self.window {
            self.buffer.pop_front().unwrap_or_default()
        } else {
            Vec::with_capacity(self.n_models)
        };
        col.clear();
        col.extend_from_slice(column);
        self.buffer.push_back(col);
        self.steps += 1;
        Ok(w)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score_model::validate_matrix;
    use proptest::prelude::*;

    fn m(rows: Vec<Vec<f64>>) -> EnsembleScoreMatrix {
        validate_matrix(rows).unwrap()
    }

    /// Direct transcription of the window definitions, independent of the
    /// sorted-window cache.
    fn brute_trace(matrix: &EnsembleScoreMatrix, window: usize) -> Vec<f64> {
        let t_len = matrix.len();
        (0..t_len)
            .map(|t| {
                if t < 2 * window {
                    return 0.0;
                }
                let mut h = Vec::new();
                let mut f = Vec::new();
                for k in 0..matrix.n_models() {
                    for c in (t - 2 * window)..(t - window) {
                        h.push(matrix.get(k, c));
                    }
                    for c in (t - window)..t {
                        f.push(matrix.get(k, c));
                    }
                }
                h.sort_by(f64::total_cmp);
                f.sort_by(f64::total_cmp);
                h.iter().zip(&f).map(|(a, b)| (a - b).abs()).sum::<f64>() / h.len() as f64
            })
            .collect()
    }

    #[test]
    fn pointwise_examples() {
        let mat = m(vec![vec![0.2, 0.4], vec![0.6, 0.8]]);
        let mean = aggregate_pointwise(&mat, Pointwise::Mean);
        assert!((mean.as_slice()[0] - 0.4).abs() < 1e-15);
        assert!((mean.as_slice()[1] - 0.6).abs() < 1e-15);

        let single = m(vec![vec![0.1, 0.7, 0.3]]);
        for stat in Pointwise::ALL {
            assert_eq!(aggregate_pointwise(&single, stat).as_slice(), &[0.1, 0.7, 0.3]);
        }

        let even = m(vec![vec![0.1, 0.9], vec![0.9, 0.1]]);
        assert_eq!(
            aggregate_pointwise(&even, Pointwise::Median).as_slice(),
            &[0.5, 0.5]
        );
        assert_eq!(aggregate_pointwise(&even, Pointwise::Min).as_slice(), &[0.1, 0.1]);
        assert_eq!(aggregate_pointwise(&even, Pointwise::Max).as_slice(), &[0.9, 0.9]);
    }

    #[test]
    fn window_trace_examples() {
        let w1 = DistanceKind::W1;
        let constant = m(vec![vec![0.3; 12]; 3]);
        for window in 1..4 {
            assert!(window_distance_trace(&constant, window, &w1)
                .unwrap()
                .iter()
                .all(|&v| v == 0.0));
        }
        // history [t-2, t-1), future [t-1, t): the step at column 2 is seen at t = 3
        let single = m(vec![vec![0.0, 0.0, 1.0, 1.0]]);
        assert_eq!(
            window_distance_trace(&single, 1, &w1).unwrap(),
            vec![0.0, 0.0, 0.0, 1.0]
        );
        let pair = m(vec![vec![0.0, 0.0, 1.0, 1.0], vec![0.0, 0.0, 1.0, 1.0]]);
        assert_eq!(
            window_distance_trace(&pair, 1, &w1).unwrap(),
            vec![0.0, 0.0, 0.0, 1.0]
        );
        let longer = m(vec![vec![0.0, 0.0, 1.0, 1.0, 1.0]]);
        assert_eq!(
            window_distance_trace(&longer, 1, &w1).unwrap(),
            vec![0.0, 0.0, 0.0, 1.0, 0.0]
        );
        assert!(matches!(
            window_distance_trace(&single, 0, &w1),
            Err(CpdError::Config(_))
        ));
    }

    #[test]
    fn short_series_gives_zero_trace() {
        let mat = m(vec![vec![0.0, 1.0, 0.0, 1.0]]);
        assert_eq!(
            window_distance_trace(&mat, 2, &DistanceKind::W1).unwrap(),
            vec![0.0; 4]
        );
    }

    #[test]
    fn detect_examples() {
        let r = detect(&[0.0, 0.0, 0.7, 0.2], 0.5).unwrap();
        assert!(r.detected());
        assert_eq!(r.tau(), 2);
        let r = detect(&[0.0; 6], 0.5).unwrap();
        assert!(!r.detected());
        assert_eq!(r.tau(), 5);
        let r = detect(&[0.6], 0.5).unwrap();
        assert_eq!(r.alarm(), Some(0));
        assert!(detect(&[], 0.5).is_err());
    }

    #[test]
    fn run_aggregator_examples() {
        let mean = AggregatorConfig {
            aggregation: Aggregation::mean(),
            threshold: 0.5,
        };
        let r = run_aggregator(&m(vec![vec![0.1, 0.9]]), &mean).unwrap();
        assert_eq!(r.alarm(), Some(1));

        let ww = AggregatorConfig {
            aggregation: Aggregation::window_w1(1),
            threshold: 0.5,
        };
        let r = run_aggregator(&m(vec![vec![0.0, 0.0, 1.0, 1.0]]), &ww).unwrap();
        assert_eq!(r.alarm(), Some(3));

        let r = run_aggregator(&m(vec![vec![0.4; 20]; 4]), &ww).unwrap();
        assert!(!r.detected());
    }

    #[test]
    fn step_peak_at_theta_plus_window() {
        for window in 1..=3 {
            for k in [1, 2, 5] {
                for (alpha, beta) in [(0.1, 0.9), (0.8, 0.3), (0.0, 1.0)] {
                    let theta = 2 * window + 3;
                    let t_len = theta + window + 4;
                    let row: Vec<f64> = (0..t_len).map(|t| if t < theta { alpha } else { beta }).collect();
                    let mat = m(vec![row; k]);
                    let trace = window_distance_trace(&mat, window, &DistanceKind::W1).unwrap();
                    let brute = brute_trace(&mat, window);
                    let peak = trace.iter().copied().fold(0.0, f64::max);
                    assert_eq!(peak, (beta - alpha).abs());
                    assert_eq!(trace[theta + window], peak);
                    let first = trace.iter().position(|&v| v == peak).unwrap();
                    assert_eq!(first, theta + window);
                    for (a, b) in trace.iter().zip(&brute) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn streaming_matches_batch() {
        let rows = vec![
            vec![0.1, 0.2, 0.15, 0.8, 0.9, 0.85, 0.95, 0.2],
            vec![0.05, 0.25, 0.1, 0.7, 0.95, 0.9, 0.9, 0.3],
            vec![0.2, 0.1, 0.2, 0.9, 0.8, 0.8, 0.99, 0.1],
        ];
        let mat = m(rows);
        for distance in [DistanceKind::W1, DistanceKind::W2, "mmd".parse().unwrap()] {
            for window in 1..=3 {
                let batch = window_distance_trace(&mat, window, &distance).unwrap();
                let mut s = StreamingWindowAggregator::new(3, window, distance).unwrap();
                let mut col = Vec::new();
                for (t, &expected) in batch.iter().enumerate() {
                    mat.column_into(t, &mut col);
                    assert_eq!(s.push(&col).unwrap(), expected, "t={t} window={window}");
                }
            }
        }
        let mut s = StreamingWindowAggregator::new(2, 1, DistanceKind::W1).unwrap();
        assert!(matches!(s.push(&[0.1]), Err(CpdError::Shape(_))));
        assert!(matches!(s.push(&[0.1, 1.1]), Err(CpdError::Domain(_))));
    }

    #[test]
    fn family_parsing() {
        assert_eq!(
            "wwaggr".parse::<AggregationFamily>().unwrap(),
            AggregationFamily::WindowDistance
        );
        assert_eq!(
            "Median".parse::<AggregationFamily>().unwrap(),
            AggregationFamily::Median
        );
        assert!("sum".parse::<AggregationFamily>().is_err());
        assert_eq!(
            AggregationFamily::WindowDistance
                .with(2, DistanceKind::W1)
                .to_string(),
            "window-w1-w2"
        );
    }

    fn matrix_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, usize)> {
        (1usize..6, 1usize..40, 1usize..4).prop_flat_map(|(k, t, w)| {
            (
                prop::collection::vec(prop::collection::vec(0.0f64..=1.0, t), k),
                Just(w),
            )
        })
    }

    proptest! {
        #[test]
        fn trace_invariants((rows, window) in matrix_strategy(), seed in any::<u64>()) {
            let mat = m(rows.clone());
            for distance in [DistanceKind::W1, DistanceKind::W2] {
                let trace = window_distance_trace(&mat, window, &distance).unwrap();
                prop_assert!(trace.iter().take(2 * window).all(|&v| v == 0.0));
                prop_assert!(trace.iter().all(|v| (0.0..=1.0).contains(v)));
                let mut shuffled = rows.clone();
                let mut rng = crate::rng::stream(seed, crate::rng::NS_MISC, 20);
                rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
                let permuted = m(shuffled);
                prop_assert_eq!(&trace, &window_distance_trace(&permuted, window, &distance).unwrap());
                for stat in Pointwise::ALL {
                    let a = aggregate_pointwise(&mat, stat);
                    let b = aggregate_pointwise(&permuted, stat);
                    prop_assert_eq!(a.as_slice(), b.as_slice());
                    prop_assert!(a.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
                }
            }
            let brute = brute_trace(&mat, window);
            let fast = window_distance_trace(&mat, window, &DistanceKind::W1).unwrap();
            for (a, b) in fast.iter().zip(&brute) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn tied_values_match_brute_force(
            (k, t, window) in (1usize..8, 1usize..60, 1usize..6),
            seed in any::<u64>(),
        ) {
            let mut rng = crate::rng::stream(seed, crate::rng::NS_MISC, 21);
            let levels = [-0.0, 0.0, 0.25, 0.5, 1.0];
            let rows: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..t).map(|_| levels[rand::Rng::random_range(&mut rng, 0..levels.len())]).collect())
                .collect();
            let mat = m(rows);
            let fast = window_distance_trace(&mat, window, &DistanceKind::W1).unwrap();
            let brute = brute_trace(&mat, window);
            for (a, b) in fast.iter().zip(&brute) {
                prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
            }
        }

        #[test]
        fn raising_threshold_never_moves_alarm_earlier(
            trace in prop::collection::vec(0.0f64..=1.0, 1..60),
            h1 in 0.0f64..=1.0,
            h2 in 0.0f64..=1.0,
        ) {
            let (lo, hi) = if h1 <= h2 { (h1, h2) } else { (h2, h1) };
            let a = detect(&trace, lo).unwrap();
            let b = detect(&trace, hi).unwrap();
            prop_assert!(b.tau() >= a.tau());
            if b.detected() {
                prop_assert!(a.detected());
            }
            if a.detected() {
                prop_assert!(trace[a.tau()] >= lo);
                prop_assert!(trace[..a.tau()].iter().all(|&v| v < lo));
            } else {
                prop_assert!(trace.iter().all(|&v| v < lo));
                prop_assert_eq!(a.tau(), trace.len() - 1);
            }
        }
    }
}
