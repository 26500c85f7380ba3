// SPDX-License-Identifier: MIT OR Apache-2.0

use ensemble_cpd::aggregation::{window_distance_trace, StreamingWindowAggregator};
use ensemble_cpd::calibration::CalibrationKind;
use ensemble_cpd::evaluation::{linspace, threshold_sweep, EvalRules};
use ensemble_cpd::experiment::{run_experiment, score_samples, ExperimentConfig};
use ensemble_cpd::io::{read_labels, read_score_matrix, write_labels, write_score_matrix, LabelRecord};
use ensemble_cpd::scorers::{Ensemble, EnsembleSpec, ScorerSpec};
use ensemble_cpd::synthgen::{DatasetSpec, RegimeSpec};
use ensemble_cpd::{Aggregation, AggregationFamily, DistanceKind};

fn small() -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSpec {
            n_train: 80,
            n_test: 40,
            seq_length: 64,
            theta_range: [16, 48],
            seed: 11,
            ..DatasetSpec::default()
        },
        ensembles: vec![EnsembleSpec::naive(ScorerSpec::logistic(4, 0.05, 2), 4, 3)],
        windows: vec![2, 4],
        ..ExperimentConfig::default()
    }
}

#[test]
fn large_mean_shift_is_found_by_one_window_stat_scorer() {
    let config = ExperimentConfig {
        dataset: DatasetSpec {
            n_train: 40,
            n_test: 100,
            seq_length: 100,
            theta_range: [20, 80],
            regime: RegimeSpec::mean_shift(4, 1.0, 5.0),
            seed: 5,
            ..DatasetSpec::default()
        },
        ensembles: vec![EnsembleSpec::naive(ScorerSpec::window_stat(6, 0.5), 1, 0)],
        calibration: CalibrationKind::None,
        families: vec![AggregationFamily::Mean],
        windows: vec![1],
        ..ExperimentConfig::default()
    };
    let run = run_experiment(&config).unwrap();
    let report = &run.report.per_family[0];
    assert!(report.best_f1 > 0.9, "best F1 {}", report.best_f1);
}

#[test]
fn experiments_are_reproducible() {
    let a = run_experiment(&small()).unwrap();
    let b = run_experiment(&small()).unwrap();
    assert_eq!(
        serde_json::to_string(&a.report).unwrap(),
        serde_json::to_string(&b.report).unwrap()
    );
    assert_eq!(a.test_calibrated, b.test_calibrated);
}

#[test]
fn selected_window_report_is_consistent() {
    let run = run_experiment(&small()).unwrap();
    let r = &run.report;
    assert!(small().windows.contains(&r.selected_window));
    assert_eq!(r.per_family.len(), AggregationFamily::ALL.len());
    let wd = r
        .per_family
        .iter()
        .find(|p| AggregationFamily::of(&p.aggregation).is_windowed())
        .unwrap();
    assert_eq!(wd.aggregation, Aggregation::window_w1(r.selected_window));
    for p in &r.aggregations {
        assert!(p.f1_at_fixed <= p.best_f1);
    }
    assert_eq!(r.rank_table.aggregations.len(), AggregationFamily::ALL.len());
}

#[test]
fn persisted_ensemble_scores_identically() {
    let run = run_experiment(&small()).unwrap();
    let reloaded = Ensemble::from_json(&run.ensemble.to_json().unwrap()).unwrap();
    let a = score_samples(&run.ensemble, &run.dataset.test).unwrap();
    let b = score_samples(&reloaded, &run.dataset.test).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, run.test_raw);
}

#[test]
fn files_round_trip_into_the_same_sweep() {
    let run = run_experiment(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut records = Vec::new();
    let mut reread = Vec::new();
    for (sample, matrix) in run.dataset.test.iter().zip(&run.test_calibrated) {
        let path = dir.path().join(format!("{}.csv", sample.id));
        write_score_matrix(&path, matrix).unwrap();
        reread.push(read_score_matrix(&path).unwrap());
        records.push(LabelRecord {
            sequence_id: sample.id.clone(),
            label: sample.label,
        });
    }
    let labels_path = dir.path().join("labels.csv");
    write_labels(&labels_path, &records).unwrap();
    let labels: Vec<_> = read_labels(&labels_path)
        .unwrap()
        .into_iter()
        .map(|r| r.label)
        .collect();
    assert_eq!(labels, run.test_truths());
    assert_eq!(reread, run.test_calibrated);

    let agg = Aggregation::window_w1(2);
    let grid = linspace(0.0, 1.0, 101);
    let rules = EvalRules::with_margin(10);
    let a = threshold_sweep(&run.test_calibrated, &run.test_truths(), &agg, rules, &grid).unwrap();
    let b = threshold_sweep(&reread, &labels, &agg, rules, &grid).unwrap();
    assert_eq!(a, b);
}

#[test]
fn streaming_matches_batch_on_pipeline_scores() {
    let run = run_experiment(&small()).unwrap();
    for matrix in run.test_calibrated.iter().take(5) {
        for window in [1, 3] {
            let batch = window_distance_trace(matrix, window, &DistanceKind::W1).unwrap();
            let mut online =
                StreamingWindowAggregator::new(matrix.n_models(), window, DistanceKind::W1).unwrap();
            let mut column = Vec::new();
            for (t, expected) in batch.iter().enumerate() {
                matrix.column_into(t, &mut column);
                let got = online.push(&column).unwrap();
                assert!((got - expected).abs() < 1e-12, "t = {t}: {got} vs {expected}");
            }
        }
    }
}

#[test]
fn calibration_lowers_pooled_ece_on_warped_members() {
    let mut config = small();
    config.ensembles = vec![EnsembleSpec::naive(
        ScorerSpec::logistic(4, 0.05, 2).with_miscalibration(2.0),
        3,
        1,
    )];
    let run = run_experiment(&config).unwrap();
    let c = &run.report.calibration;
    assert!(c.ece_after < c.ece_before, "{} vs {}", c.ece_after, c.ece_before);
}
