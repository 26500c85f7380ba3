// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end runs: generate data, train an ensemble, calibrate each member
//! on held-out training sequences, aggregate test matrices and evaluate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{Aggregation, AggregationFamily};
use crate::calibration::{
    calibration_report, CalibrationKind, CalibrationReport, Calibrator, DEFAULT_CLIP_EPSILON,
    DEFAULT_ECE_BINS,
};
use crate::distances::DistanceKind;
use crate::error::{CpdError, Result};
use crate::evaluation::{
    default_margin, evaluate_traces, rank_aggregations, traces_for, AggregationReport, CellScores,
    EarlyAlarm, EvalRules, RankTable, SweepResult,
};
use crate::score_model::{EnsembleScoreMatrix, LabeledSequence, ScoreSequence};
use crate::scorers::{train_ensemble, Ensemble, EnsembleSpec, ScorerSpec};
use crate::synthgen::{generate, Dataset, DatasetSpec, Sample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub ensembles: Vec<EnsembleSpec>,
    pub calibration: CalibrationKind,
    pub clip_epsilon: f64,
    /// Fraction of training sequences held out to fit calibrators.
    pub calibration_holdout: f64,
    pub ece_bins: usize,
    pub families: Vec<AggregationFamily>,
    /// Window sizes tried for the window-distance family.
    pub windows: Vec<usize>,
    pub distance: DistanceKind,
    /// Defaults to `2 * max(windows) + max feature window`.
    pub margin: Option<usize>,
    pub early_alarm: EarlyAlarm,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            ensembles: vec![EnsembleSpec::naive(default_logistic(), 10, 0)],
            calibration: CalibrationKind::Beta,
            clip_epsilon: DEFAULT_CLIP_EPSILON,
            calibration_holdout: 0.5,
            ece_bins: DEFAULT_ECE_BINS,
            families: AggregationFamily::ALL.to_vec(),
            windows: vec![4, 8, 12, 16],
            distance: DistanceKind::W1,
            margin: None,
            early_alarm: EarlyAlarm::default(),
        }
    }
}

/// Logistic base scorer used by the default benchmark.
pub fn default_logistic() -> ScorerSpec {
    ScorerSpec::logistic(4, 0.05, 3)
}

/// Mixed ensemble of K = 10: six logistic members on short windows (three
/// naive, three bootstrapped), two on longer windows, one window statistic
/// and one projection scorer.
pub fn mixed_ensemble(first_seed: u64) -> Vec<EnsembleSpec> {
    use crate::scorers::Diversity;
    let s = first_seed;
    vec![
        EnsembleSpec::naive(default_logistic(), 3, s),
        EnsembleSpec {
            base: default_logistic(),
            size: 3,
            diversity: Diversity::Bootstrap {
                seeds: vec![s + 3, s + 4, s + 5],
                sample_fraction: 0.5,
            },
        },
        EnsembleSpec::naive(ScorerSpec::logistic(8, 0.05, 3), 2, s + 6),
        EnsembleSpec::naive(ScorerSpec::window_stat(8, 0.5), 1, 0),
        EnsembleSpec::naive(ScorerSpec::cosine_projection(16, 8), 1, s + 9),
    ]
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if self.ensembles.is_empty() {
            return Err(CpdError::config("no ensembles configured"));
        }
        for e in &self.ensembles {
            e.validate()?;
        }
        if !(self.calibration_holdout > 0.0 && self.calibration_holdout < 1.0) {
            return Err(CpdError::config("calibration_holdout must lie in (0, 1)"));
        }
        if self.families.is_empty() {
            return Err(CpdError::config("no aggregation families configured"));
        }
        if self.windows.is_empty() || self.windows.contains(&0) {
            return Err(CpdError::config("windows must be a non-empty list of sizes >= 1"));
        }
        self.distance.validate()
    }

    pub fn max_feature_window(&self) -> usize {
        self.ensembles
            .iter()
            .map(|e| e.base.kind.feature_window())
            .max()
            .unwrap_or(0)
    }

    pub fn rules(&self) -> EvalRules {
        let max_window = self.windows.iter().copied().max().unwrap_or(1);
        EvalRules {
            margin: self
                .margin
                .unwrap_or_else(|| default_margin(max_window, self.max_feature_window())),
            early_alarm: self.early_alarm,
        }
    }

    /// Every aggregation to evaluate: pointwise families once, the window
    /// family once per window size.
    pub fn aggregations(&self) -> Vec<Aggregation> {
        self.families
            .iter()
            .flat_map(|&f| {
                if f.is_windowed() {
                    self.windows.iter().map(|&w| f.with(w, self.distance)).collect()
                } else {
                    vec![f.with(1, self.distance)]
                }
            })
            .collect()
    }
}

/// Splits training sequences into a fitting part and a calibration hold-out
/// (the last `holdout` fraction, at least one sequence each).
pub fn split_for_calibration(train: &[Sample], holdout: f64) -> Result<(&[Sample], &[Sample])> {
    if train.len() < 2 {
        return Err(CpdError::fit("need at least two training sequences"));
    }
    let n_hold = ((train.len() as f64 * holdout).round() as usize).clamp(1, train.len() - 1);
    Ok(train.split_at(train.len() - n_hold))
}

pub fn score_samples(ensemble: &Ensemble, samples: &[Sample]) -> Result<Vec<EnsembleScoreMatrix>> {
    samples
        .par_iter()
        .map(|s| ensemble.score_matrix(&s.series))
        .collect()
}

/// Fits one calibrator per ensemble member on the pooled scores of all
/// steps of all hold-out sequences.
pub fn fit_calibrators(
    matrices: &[EnsembleScoreMatrix],
    truths: &[LabeledSequence],
    kind: CalibrationKind,
    clip_epsilon: f64,
) -> Result<Vec<Calibrator>> {
    let k = check_matrices(matrices, truths)?;
    let labels: Vec<u8> = truths.iter().flat_map(|t| t.labels()).collect();
    (0..k)
        .into_par_iter()
        .map(|m| {
            let scores: Vec<f64> = matrices
                .iter()
                .flat_map(|x| x.row(m).as_slice().iter().copied())
                .collect();
            kind.fit(&scores, &labels, clip_epsilon)
        })
        .collect()
}

fn check_matrices(matrices: &[EnsembleScoreMatrix], truths: &[LabeledSequence]) -> Result<usize> {
    if matrices.is_empty() || matrices.len() != truths.len() {
        return Err(CpdError::shape(format!(
            "{} score matrices but {} label sequences",
            matrices.len(),
            truths.len()
        )));
    }
    let k = matrices[0].n_models();
    for (i, (m, t)) in matrices.iter().zip(truths).enumerate() {
        if m.n_models() != k {
            return Err(CpdError::shape(format!(
                "matrix {i} has {} models, expected {k}",
                m.n_models()
            )));
        }
        if m.len() != t.len() {
            return Err(CpdError::shape(format!(
                "matrix {i} has length {} but its labels have length {}",
                m.len(),
                t.len()
            )));
        }
    }
    Ok(k)
}

pub fn apply_calibrators(
    matrix: &EnsembleScoreMatrix,
    calibrators: &[Calibrator],
) -> Result<EnsembleScoreMatrix> {
    if calibrators.len() != matrix.n_models() {
        return Err(CpdError::shape(format!(
            "{} calibrators for {} models",
            calibrators.len(),
            matrix.n_models()
        )));
    }
    matrix.map_rows(|k, row| ScoreSequence::new(calibrators[k].apply(row.as_slice())))
}

/// ECE of the pooled member scores before and after calibration.
pub fn pooled_calibration_report(
    raw: &[EnsembleScoreMatrix],
    calibrated: &[EnsembleScoreMatrix],
    truths: &[LabeledSequence],
    n_bins: usize,
) -> Result<CalibrationReport> {
    check_matrices(raw, truths)?;
    check_matrices(calibrated, truths)?;
    let (mut r, mut c, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for ((a, b), t) in raw.iter().zip(calibrated).zip(truths) {
        let labels = t.labels();
        for k in 0..a.n_models() {
            r.extend_from_slice(a.row(k).as_slice());
            c.extend_from_slice(b.row(k).as_slice());
            y.extend_from_slice(&labels);
        }
    }
    calibration_report(&r, &c, &y, n_bins)
}

/// Evaluates every aggregation over the same matrices.
pub fn evaluate_aggregations(
    matrices: &[EnsembleScoreMatrix],
    truths: &[LabeledSequence],
    aggregations: &[Aggregation],
    rules: EvalRules,
    thresholds: Option<&[f64]>,
) -> Result<Vec<(AggregationReport, SweepResult)>> {
    aggregations
        .iter()
        .map(|a| {
            let traces = traces_for(matrices, a)?;
            evaluate_traces(*a, &traces, truths, rules, thresholds)
        })
        .collect()
}

/// Best entry of each family by best-threshold F1 (first on ties).
pub fn best_per_family(reports: &[AggregationReport]) -> Vec<AggregationReport> {
    let mut out: Vec<AggregationReport> = Vec::new();
    for r in reports {
        let fam = AggregationFamily::of(&r.aggregation);
        match out
            .iter_mut()
            .find(|o| AggregationFamily::of(&o.aggregation) == fam)
        {
            Some(o) if r.best_f1 > o.best_f1 => *o = r.clone(),
            Some(_) => {}
            None => out.push(r.clone()),
        }
    }
    out
}

/// One entry per family, taking the window family's entry for `window`.
pub fn select_per_family(reports: &[AggregationReport], window: usize) -> Vec<AggregationReport> {
    let mut out: Vec<AggregationReport> = reports
        .iter()
        .filter(|r| match r.aggregation {
            Aggregation::Pointwise { .. } => true,
            Aggregation::WindowDistance { window: w, .. } => w == window,
        })
        .cloned()
        .collect();
    out.dedup_by_key(|r| AggregationFamily::of(&r.aggregation));
    out
}

/// Window size with the highest best-threshold F1 on a validation set
/// (smallest window on ties).
pub fn select_window(
    matrices: &[EnsembleScoreMatrix],
    truths: &[LabeledSequence],
    windows: &[usize],
    distance: DistanceKind,
    rules: EvalRules,
) -> Result<usize> {
    let aggs: Vec<Aggregation> = windows
        .iter()
        .map(|&w| AggregationFamily::WindowDistance.with(w, distance))
        .collect();
    let reports = evaluate_aggregations(matrices, truths, &aggs, rules, None)?;
    let mut best = (windows[0], f64::NEG_INFINITY);
    for (&w, (r, _)) in windows.iter().zip(&reports) {
        if r.best_f1 > best.1 {
            best = (w, r.best_f1);
        }
    }
    Ok(best.0)
}

/// One F1 column per family for [`rank_aggregations`].
pub fn rank_cell(cell: &str, family_reports: &[AggregationReport], at_fixed: bool) -> CellScores {
    CellScores {
        cell: cell.to_string(),
        f1: family_reports
            .iter()
            .map(|r| {
                let f = if at_fixed { r.f1_at_fixed } else { r.best_f1 };
                (AggregationFamily::of(&r.aggregation).name().to_string(), f)
            })
            .collect(),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub margin: usize,
    pub early_alarm: EarlyAlarm,
    pub calibration_kind: CalibrationKind,
    pub calibration: CalibrationReport,
    pub n_test_sequences: usize,
    /// Window size chosen on the calibration hold-out.
    pub selected_window: usize,
    pub aggregations: Vec<AggregationReport>,
    /// One entry per family; the window family at `selected_window`.
    pub per_family: Vec<AggregationReport>,
    pub rank_table: RankTable,
}

/// Everything produced by [`run_experiment`].
pub struct ExperimentRun {
    pub dataset: Dataset,
    pub ensemble: Ensemble,
    pub calibrators: Vec<Calibrator>,
    pub test_raw: Vec<EnsembleScoreMatrix>,
    pub test_calibrated: Vec<EnsembleScoreMatrix>,
    pub sweeps: Vec<SweepResult>,
    pub report: ExperimentReport,
}

impl ExperimentRun {
    pub fn test_truths(&self) -> Vec<LabeledSequence> {
        self.dataset.test.iter().map(|s| s.label).collect()
    }
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentRun> {
    config.validate()?;
    let dataset = generate(&config.dataset)?;
    if dataset.test.is_empty() {
        return Err(CpdError::config("n_test must be >= 1 to evaluate"));
    }
    let (fit_part, holdout) = split_for_calibration(&dataset.train, config.calibration_holdout)?;
    let ensemble = train_ensemble(&config.ensembles, fit_part)?;

    let hold_truths: Vec<LabeledSequence> = holdout.iter().map(|s| s.label).collect();
    let hold_scores = score_samples(&ensemble, holdout)?;
    let calibrators = fit_calibrators(
        &hold_scores,
        &hold_truths,
        config.calibration,
        config.clip_epsilon,
    )?;
    let rules = config.rules();
    let selected_window = if config.windows.len() > 1 && config.families.iter().any(|f| f.is_windowed()) {
        let hold_calibrated = hold_scores
            .par_iter()
            .map(|m| apply_calibrators(m, &calibrators))
            .collect::<Result<Vec<_>>>()?;
        select_window(
            &hold_calibrated,
            &hold_truths,
            &config.windows,
            config.distance,
            rules,
        )?
    } else {
        config.windows[0]
    };

    let truths: Vec<LabeledSequence> = dataset.test.iter().map(|s| s.label).collect();
    let test_raw = score_samples(&ensemble, &dataset.test)?;
    let test_calibrated = test_raw
        .par_iter()
        .map(|m| apply_calibrators(m, &calibrators))
        .collect::<Result<Vec<_>>>()?;
    let calibration = pooled_calibration_report(&test_raw, &test_calibrated, &truths, config.ece_bins)?;

    let evaluated = evaluate_aggregations(&test_calibrated, &truths, &config.aggregations(), rules, None)?;
    let (reports, sweeps): (Vec<_>, Vec<_>) = evaluated.into_iter().unzip();
    let per_family = select_per_family(&reports, selected_window);
    let rank_table = if per_family.len() >= 2 {
        rank_aggregations(&[rank_cell("test", &per_family, false)])?
    } else {
        RankTable {
            aggregations: per_family.iter().map(|r| r.name.clone()).collect(),
            cells: Vec::new(),
            mean_ranks: vec![1.0; per_family.len()],
        }
    };
    Ok(ExperimentRun {
        report: ExperimentReport {
            margin: rules.margin,
            early_alarm: rules.early_alarm,
            calibration_kind: config.calibration,
            calibration,
            n_test_sequences: truths.len(),
            selected_window,
            aggregations: reports,
            per_family,
            rank_table,
        },
        dataset,
        ensemble,
        calibrators,
        test_raw,
        test_calibrated,
        sweeps,
    })
}

/// Applies a `s -> s^gamma` warp to every row.
pub fn warp_matrix(matrix: &EnsembleScoreMatrix, gamma: f64) -> Result<EnsembleScoreMatrix> {
    let rows = matrix
        .rows()
        .iter()
        .map(|r| crate::scorers::apply_miscalibration(r, gamma))
        .collect::<Result<Vec<ScoreSequence>>>()?;
    EnsembleScoreMatrix::with_ids(rows, matrix.model_ids().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetSpec {
                n_train: 60,
                n_test: 30,
                seq_length: 96,
                theta_range: [30, 70],
                ..DatasetSpec::default()
            },
            ensembles: vec![EnsembleSpec::naive(ScorerSpec::logistic(6, 0.05, 2), 3, 0)],
            windows: vec![2, 3],
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn runs_end_to_end() {
        let run = run_experiment(&quick()).unwrap();
        let r = &run.report;
        assert_eq!(r.margin, 2 * 3 + 6);
        assert_eq!(r.aggregations.len(), 4 + 2);
        assert_eq!(r.per_family.len(), 5);
        assert!([2, 3].contains(&r.selected_window));
        assert_eq!(r.rank_table.aggregations.len(), 5);
        assert!(r.calibration.ece_after <= r.calibration.ece_before + 1e-9);
        assert_eq!(run.test_calibrated.len(), 30);
        assert!(run.sweeps.iter().all(|s| s.f1_at_fixed <= s.best_f1));
    }

    #[test]
    fn reproducible() {
        let a = run_experiment(&quick()).unwrap();
        let b = run_experiment(&quick()).unwrap();
        assert_eq!(a.test_calibrated, b.test_calibrated);
        assert_eq!(
            serde_json::to_string(&a.report).unwrap(),
            serde_json::to_string(&b.report).unwrap()
        );
    }

    #[test]
    fn calibrator_count_must_match() {
        let m = EnsembleScoreMatrix::new(vec![ScoreSequence::new(vec![0.2, 0.4]).unwrap()]).unwrap();
        assert!(apply_calibrators(&m, &[]).is_err());
        let id = apply_calibrators(&m, &[Calibrator::Identity]).unwrap();
        assert_eq!(id, m);
    }

    #[test]
    fn holdout_split_sizes() {
        let ds = generate(&quick().dataset).unwrap();
        let (a, b) = split_for_calibration(&ds.train, 0.5).unwrap();
        assert_eq!((a.len(), b.len()), (30, 30));
        let (a, b) = split_for_calibration(&ds.train[..2], 0.99).unwrap();
        assert_eq!((a.len(), b.len()), (1, 1));
    }
}
