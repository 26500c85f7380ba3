// SPDX-License-Identifier: MIT OR Apache-2.0

//! Detection outcomes, F1, threshold sweeps, rank tables and delays.
//!
//! Rules for one sequence with margin `M`:
//!
//! | truth        | alarm               | outcome |
//! |--------------|---------------------|---------|
//! | change at θ  | θ <= τ <= θ + M     | TP      |
//! | change at θ  | τ < θ               | FP + FN (or FP only, see [`EarlyAlarm`]) |
//! | change at θ  | τ > θ + M           | FN      |
//! | change at θ  | none                | FN      |
//! | no change    | any                 | FP      |
//! | no change    | none                | TN      |

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::Aggregation;
use crate::error::{CpdError, Result};
use crate::score_model::{DetectionResult, EnsembleScoreMatrix, LabeledSequence};

/// Threshold used by the fixed-threshold protocol.
pub const FIXED_THRESHOLD: f64 = 0.5;
/// Points in the default threshold grid.
pub const DEFAULT_GRID_POINTS: usize = 300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    TruePositive,
    FalsePositive,
    FalseNegative,
    TrueNegative,
    /// Alarm before the change: a false alarm and a missed change at once.
    FalsePositiveAndNegative,
}

/// How an alarm before the true change point is counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyAlarm {
    #[default]
    FalsePositiveAndNegative,
    FalsePositiveOnly,
}

impl FromStr for EarlyAlarm {
    type Err = CpdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp-fn" | "fp_fn" | "false_positive_and_negative" => Ok(Self::FalsePositiveAndNegative),
            "fp-only" | "fp_only" | "false_positive_only" => Ok(Self::FalsePositiveOnly),
            _ => Err(CpdError::config(format!(
                "unknown early-alarm rule {s:?}, expected fp-fn or fp-only"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRules {
    pub margin: usize,
    #[serde(default)]
    pub early_alarm: EarlyAlarm,
}

impl EvalRules {
    pub fn with_margin(margin: usize) -> Self {
        Self {
            margin,
            early_alarm: EarlyAlarm::default(),
        }
    }
}

/// Margin that absorbs the delay of a window aggregation of size `window`
/// on top of scorers looking `feature_window` steps back.
pub fn default_margin(window: usize, feature_window: usize) -> usize {
    2 * window + feature_window
}

/// Outcome for a change point (if any) and an alarm time (if any).
pub fn classify(change_point: Option<usize>, alarm: Option<usize>, rules: EvalRules) -> Outcome {
    match (change_point, alarm) {
        (None, None) => Outcome::TrueNegative,
        (None, Some(_)) => Outcome::FalsePositive,
        (Some(_), None) => Outcome::FalseNegative,
        (Some(theta), Some(tau)) if tau < theta => match rules.early_alarm {
            EarlyAlarm::FalsePositiveAndNegative => Outcome::FalsePositiveAndNegative,
            EarlyAlarm::FalsePositiveOnly => Outcome::FalsePositive,
        },
        (Some(theta), Some(tau)) if tau - theta <= rules.margin => Outcome::TruePositive,
        (Some(_), Some(_)) => Outcome::FalseNegative,
    }
}

pub fn classify_detection(
    truth: &LabeledSequence,
    result: &DetectionResult,
    margin: usize,
) -> Result<Outcome> {
    classify_detection_with(truth, result, EvalRules::with_margin(margin))
}

pub fn classify_detection_with(
    truth: &LabeledSequence,
    result: &DetectionResult,
    rules: EvalRules,
) -> Result<Outcome> {
    if truth.len() != result.len() {
        return Err(CpdError::shape(format!(
            "truth has length {} but the detection trace has length {}",
            truth.len(),
            result.len()
        )));
    }
    Ok(classify(truth.change_point(), result.alarm(), rules))
}

/// Outcome tallies. A compound early alarm is kept in its own bucket and
/// counts towards both FP and FN.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp_only: usize,
    pub fn_only: usize,
    pub tn: usize,
    pub fp_fn: usize,
}

impl ConfusionCounts {
    pub fn add(&mut self, outcome: Outcome) {
        match outcome {
            Outcome::TruePositive => self.tp += 1,
            Outcome::FalsePositive => self.fp_only += 1,
            Outcome::FalseNegative => self.fn_only += 1,
            Outcome::TrueNegative => self.tn += 1,
            Outcome::FalsePositiveAndNegative => self.fp_fn += 1,
        }
    }

    pub fn false_positives(&self) -> usize {
        self.fp_only + self.fp_fn
    }

    pub fn false_negatives(&self) -> usize {
        self.fn_only + self.fp_fn
    }

    /// Number of sequences evaluated.
    pub fn sequences(&self) -> usize {
        self.tp + self.fp_only + self.fn_only + self.tn + self.fp_fn
    }

    pub fn f1(&self) -> f64 {
        f1_score(self)
    }
}

impl FromIterator<Outcome> for ConfusionCounts {
    fn from_iter<I: IntoIterator<Item = Outcome>>(iter: I) -> Self {
        let mut c = Self::default();
        iter.into_iter().for_each(|o| c.add(o));
        c
    }
}

/// `2 TP / (2 TP + FP + FN)`; 0 (with a warning) when nothing was counted.
pub fn f1_score(counts: &ConfusionCounts) -> f64 {
    let tp = counts.tp as f64;
    let denom = 2.0 * tp + (counts.false_positives() + counts.false_negatives()) as f64;
    if denom == 0.0 {
        log::warn!("F1 undefined with no positives, false positives or false negatives; reporting 0");
        return 0.0;
    }
    2.0 * tp / denom
}

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| {
                if i == n - 1 {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}

/// Default sweep grid: 300 points on [0, 1] for bounded statistics, on
/// [0, largest observed value] otherwise.
pub fn default_thresholds(traces: &[Vec<f64>], unit_bounded: bool) -> Vec<f64> {
    let hi = if unit_bounded {
        1.0
    } else {
        traces
            .iter()
            .flatten()
            .cloned()
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE)
    };
    linspace(0.0, hi, DEFAULT_GRID_POINTS)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub thresholds: Vec<f64>,
    pub f1_per_threshold: Vec<f64>,
    pub best_f1: f64,
    pub best_threshold: f64,
    pub fixed_threshold: f64,
    pub f1_at_fixed: f64,
    pub counts_at_best: ConfusionCounts,
    pub counts_at_fixed: ConfusionCounts,
}

/// Running maximum of each trace: the first alarm at threshold `h` is the
/// first index where the running maximum reaches `h`.
struct AlarmIndex {
    running_max: Vec<f64>,
}

impl AlarmIndex {
    fn new(trace: &[f64]) -> Self {
        let mut m = f64::NEG_INFINITY;
        Self {
            running_max: trace
                .iter()
                .map(|&v| {
                    m = m.max(v);
                    m
                })
                .collect(),
        }
    }

    fn alarm(&self, h: f64) -> Option<usize> {
        let i = self.running_max.partition_point(|&v| v < h);
        (i < self.running_max.len()).then_some(i)
    }
}

fn check_traces(traces: &[Vec<f64>], truths: &[LabeledSequence]) -> Result<()> {
    if traces.len() != truths.len() {
        return Err(CpdError::shape(format!(
            "{} traces but {} label sequences",
            traces.len(),
            truths.len()
        )));
    }
    for (i, (tr, lb)) in traces.iter().zip(truths).enumerate() {
        if tr.len() != lb.len() {
            return Err(CpdError::shape(format!(
                "sequence {i}: trace length {} but label length {}",
                tr.len(),
                lb.len()
            )));
        }
    }
    Ok(())
}

/// Confusion counts of every threshold, for precomputed traces.
pub fn counts_per_threshold(
    traces: &[Vec<f64>],
    truths: &[LabeledSequence],
    rules: EvalRules,
    thresholds: &[f64],
) -> Result<Vec<ConfusionCounts>> {
    check_traces(traces, truths)?;
    let index: Vec<AlarmIndex> = traces.iter().map(|t| AlarmIndex::new(t)).collect();
    Ok(thresholds
        .par_iter()
        .map(|&h| {
            index
                .iter()
                .zip(truths)
                .map(|(ix, lb)| classify(lb.change_point(), ix.alarm(h), rules))
                .collect()
        })
        .collect())
}

/// Sweeps `thresholds` (plus `fixed`, which is merged into the grid if
/// absent) over precomputed traces.
pub fn sweep_traces(
    traces: &[Vec<f64>],
    truths: &[LabeledSequence],
    rules: EvalRules,
    thresholds: &[f64],
    fixed: f64,
) -> Result<SweepResult> {
    if thresholds.is_empty() {
        return Err(CpdError::config("threshold grid is empty"));
    }
    if thresholds.iter().chain([&fixed]).any(|h| h.is_nan()) {
        return Err(CpdError::config("threshold grid contains NaN"));
    }
    let mut grid = thresholds.to_vec();
    grid.push(fixed);
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let counts = counts_per_threshold(traces, truths, rules, &grid)?;
    let f1: Vec<f64> = counts.iter().map(f1_score).collect();
    // Ties go to the lowest threshold.
    let best = f1
        .iter()
        .enumerate()
        .fold(0, |b, (i, &v)| if v > f1[b] { i } else { b });
    let fixed_at = grid
        .iter()
        .position(|&h| h == fixed)
        .expect("fixed threshold is in the grid");
    Ok(SweepResult {
        best_f1: f1[best],
        best_threshold: grid[best],
        fixed_threshold: fixed,
        f1_at_fixed: f1[fixed_at],
        counts_at_best: counts[best],
        counts_at_fixed: counts[fixed_at],
        thresholds: grid,
        f1_per_threshold: f1,
    })
}

/// Traces of `aggregation` for every matrix, computed in parallel.
pub fn traces_for(matrices: &[EnsembleScoreMatrix], aggregation: &Aggregation) -> Result<Vec<Vec<f64>>> {
    aggregation.validate()?;
    matrices.par_iter().map(|m| aggregation.trace(m)).collect()
}

/// Computes each sequence's trace once, then sweeps the thresholds.
pub fn threshold_sweep(
    matrices: &[EnsembleScoreMatrix],
    truths: &[LabeledSequence],
    aggregation: &Aggregation,
    rules: EvalRules,
    thresholds: &[f64],
) -> Result<SweepResult> {
    let traces = traces_for(matrices, aggregation)?;
    sweep_traces(&traces, truths, rules, thresholds, FIXED_THRESHOLD)
}

/// Best F1 reachable with `n` thresholds placed at the midpoints of `n`
/// equal bins of `[lo, hi]`. With `n = 1` on `[0, 1]` that is the fixed
/// threshold 0.5.
pub fn threshold_count_curve(
    traces: &[Vec<f64>],
    truths: &[LabeledSequence],
    rules: EvalRules,
    counts: &[usize],
    range: (f64, f64),
) -> Result<Vec<(usize, f64)>> {
    let (lo, hi) = range;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(CpdError::config(format!("invalid threshold range [{lo}, {hi}]")));
    }
    counts
        .iter()
        .map(|&n| {
            if n == 0 {
                return Err(CpdError::config("threshold count must be >= 1"));
            }
            let grid: Vec<f64> = (0..n)
                .map(|i| lo + (hi - lo) * (i as f64 + 0.5) / n as f64)
                .collect();
            let best = counts_per_threshold(traces, truths, rules, &grid)?
                .iter()
                .map(f1_score)
                .fold(0.0, f64::max);
            Ok((n, best))
        })
        .collect()
}

pub fn format_threshold_count_csv(curve: &[(usize, f64)]) -> String {
    let mut out = String::from("n_thresholds,best_f1\n");
    for (n, f1) in curve {
        out.push_str(&format!("{n},{f1:?}\n"));
    }
    out
}

/// `threshold,f1,distance_kind` rows for several sweeps.
pub fn format_distance_curve_csv(curves: &[(String, &SweepResult)]) -> String {
    let mut out = String::from("threshold,f1,distance_kind\n");
    for (label, sweep) in curves {
        for (h, f1) in sweep.thresholds.iter().zip(&sweep.f1_per_threshold) {
            out.push_str(&format!("{h:?},{f1:?},{label}\n"));
        }
    }
    out
}

/// F1 of each aggregation in one comparison cell (a dataset, model, seed...).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellScores {
    pub cell: String,
    pub f1: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedCell {
    pub cell: String,
    /// Ranks aligned with [`RankTable::aggregations`].
    pub ranks: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub aggregations: Vec<String>,
    pub cells: Vec<RankedCell>,
    pub mean_ranks: Vec<f64>,
}

impl RankTable {
    pub fn mean_rank(&self, aggregation: &str) -> Option<f64> {
        self.aggregations
            .iter()
            .position(|a| a == aggregation)
            .map(|i| self.mean_ranks[i])
    }
}

/// Ranks of `values` by descending value, 1-based, ties averaged.
pub fn descending_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Ranks aggregations within each cell by descending F1 and averages the
/// ranks over cells. Every cell must score every aggregation.
pub fn rank_aggregations(cells: &[CellScores]) -> Result<RankTable> {
    if cells.is_empty() {
        return Err(CpdError::config("rank table needs at least one cell"));
    }
    let aggregations: Vec<String> = cells
        .iter()
        .flat_map(|c| c.f1.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if aggregations.len() < 2 {
        return Err(CpdError::config("rank table needs at least two aggregations"));
    }
    let gaps: Vec<String> = cells
        .iter()
        .flat_map(|c| {
            aggregations
                .iter()
                .filter(|a| !c.f1.contains_key(*a))
                .map(move |a| format!("{} has no F1 for {a}", c.cell))
        })
        .collect();
    if !gaps.is_empty() {
        return Err(CpdError::config(format!(
            "incomplete rank table: {}",
            gaps.join("; ")
        )));
    }
    if let Some(c) = cells.iter().find(|c| c.f1.values().any(|v| v.is_nan())) {
        return Err(CpdError::domain(format!("{} has a NaN F1", c.cell)));
    }
    let ranked: Vec<RankedCell> = cells
        .iter()
        .map(|c| RankedCell {
            cell: c.cell.clone(),
            ranks: descending_ranks(&aggregations.iter().map(|a| c.f1[a]).collect::<Vec<_>>()),
        })
        .collect();
    let mean_ranks = (0..aggregations.len())
        .map(|i| ranked.iter().map(|c| c.ranks[i]).sum::<f64>() / ranked.len() as f64)
        .collect();
    Ok(RankTable {
        aggregations,
        cells: ranked,
        mean_ranks,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayStats {
    pub true_positives: usize,
    /// Mean of `tau - theta` over true positives; absent without any.
    pub mean_delay: Option<f64>,
    pub median_delay: Option<f64>,
    /// Sequences with an alarm that counts as a false positive.
    pub false_alarms: usize,
}

pub fn delay_stats(
    truths: &[LabeledSequence],
    results: &[DetectionResult],
    rules: EvalRules,
) -> Result<DelayStats> {
    if truths.len() != results.len() {
        return Err(CpdError::shape(format!(
            "{} label sequences but {} detection results",
            truths.len(),
            results.len()
        )));
    }
    let mut delays = Vec::new();
    let mut false_alarms = 0;
    for (truth, res) in truths.iter().zip(results) {
        match classify_detection_with(truth, res, rules)? {
            Outcome::TruePositive => {
                delays.push((res.tau() - truth.change_point().expect("TP has a change")) as f64)
            }
            Outcome::FalsePositive | Outcome::FalsePositiveAndNegative => false_alarms += 1,
            _ => {}
        }
    }
    delays.sort_by(f64::total_cmp);
    let n = delays.len();
    let median = match n {
        0 => None,
        _ if n % 2 == 1 => Some(delays[n / 2]),
        _ => Some((delays[n / 2 - 1] + delays[n / 2]) / 2.0),
    };
    Ok(DelayStats {
        true_positives: n,
        mean_delay: (n > 0).then(|| delays.iter().sum::<f64>() / n as f64),
        median_delay: median,
        false_alarms,
    })
}

/// Summary of one aggregation on one evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregationReport {
    pub aggregation: Aggregation,
    pub name: String,
    pub best_f1: f64,
    pub best_threshold: f64,
    pub f1_at_fixed: f64,
    pub counts_at_best: ConfusionCounts,
    pub counts_at_fixed: ConfusionCounts,
    pub delay_at_fixed: DelayStats,
    pub n_thresholds: usize,
}

impl fmt::Display for AggregationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<24} best F1 {:.4} (h = {:.4})  F1 at h = 0.5 {:.4}",
            self.name, self.best_f1, self.best_threshold, self.f1_at_fixed
        )
    }
}

/// Sweeps an aggregation over precomputed traces and summarises it.
pub fn evaluate_traces(
    aggregation: Aggregation,
    traces: &[Vec<f64>],
    truths: &[LabeledSequence],
    rules: EvalRules,
    thresholds: Option<&[f64]>,
) -> Result<(AggregationReport, SweepResult)> {
    let grid = match thresholds {
        Some(g) => g.to_vec(),
        None => default_thresholds(traces, aggregation.is_unit_bounded()),
    };
    let sweep = sweep_traces(traces, truths, rules, &grid, FIXED_THRESHOLD)?;
    let results = traces
        .iter()
        .map(|t| DetectionResult::from_trace(t.clone(), FIXED_THRESHOLD))
        .collect::<Result<Vec<_>>>()?;
    let report = AggregationReport {
        aggregation,
        name: aggregation.to_string(),
        best_f1: sweep.best_f1,
        best_threshold: sweep.best_threshold,
        f1_at_fixed: sweep.f1_at_fixed,
        counts_at_best: sweep.counts_at_best,
        counts_at_fixed: sweep.counts_at_fixed,
        delay_at_fixed: delay_stats(truths, &results, rules)?,
        n_thresholds: sweep.thresholds.len(),
    };
    Ok((report, sweep))
}
