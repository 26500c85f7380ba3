// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ensemble_cpd::aggregation::detect;
use ensemble_cpd::calibration::{CalibrationKind, CalibrationReport};
use ensemble_cpd::evaluation::{
    counts_per_threshold, default_thresholds, format_distance_curve_csv, format_threshold_count_csv,
    rank_aggregations, sweep_traces, threshold_count_curve, traces_for, AggregationReport, EarlyAlarm,
    RankTable, FIXED_THRESHOLD,
};
use ensemble_cpd::experiment::{
    evaluate_aggregations, fit_calibrators, pooled_calibration_report, rank_cell, score_samples,
    select_per_family, select_window, split_for_calibration,
};
use ensemble_cpd::io::{
    write_labels, write_score_matrix, write_series, write_text, write_trace, LabelRecord,
};
use ensemble_cpd::scorers::train_ensemble;
use ensemble_cpd::synthgen::{self, Sample};
use ensemble_cpd::{AggregationFamily, Bandwidth, CpdError, DistanceKind, Result};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::{CliConfig, Protocol};
use crate::layout::{
    calibrated, load_dataset, load_scores, read_json, read_score_set, slug, to_json, CalibratorFile,
    DataSplit, Layout, Manifest, ManifestEntry, MemberCalibrator, ScoreSet, Split,
};

pub fn generate(cfg: &CliConfig, layout: &Layout) -> Result<()> {
    let spec = &cfg.experiment.dataset;
    let data = synthgen::generate(spec)?;
    let mut sequences = Vec::new();
    let mut records = Vec::new();
    for (split, samples) in [(DataSplit::Train, &data.train), (DataSplit::Test, &data.test)] {
        for s in samples {
            let rel = format!("series/{}.csv", s.id);
            write_series(&layout.dataset().join(&rel), &s.series)?;
            sequences.push(ManifestEntry {
                id: s.id.clone(),
                split: split.clone(),
                series: rel,
                length: s.label.len(),
                change_point: s.label.change_point(),
            });
            records.push(LabelRecord {
                sequence_id: s.id.clone(),
                label: s.label,
            });
        }
    }
    write_labels(&layout.dataset().join("labels.csv"), &records)?;
    let manifest = Manifest {
        spec: spec.clone(),
        n_train: data.train.len(),
        n_test: data.test.len(),
        sequences,
    };
    write_text(&layout.manifest(), &to_json(&manifest))?;
    println!(
        "generated {} train and {} test sequences in {}",
        manifest.n_train,
        manifest.n_test,
        layout.dataset().display()
    );
    Ok(())
}

fn write_score_split(
    layout: &Layout,
    split: Split,
    samples: &[Sample],
    set: &[ensemble_cpd::EnsembleScoreMatrix],
) -> Result<()> {
    let dir = layout.scores(split);
    let mut records = Vec::with_capacity(samples.len());
    for (s, m) in samples.iter().zip(set) {
        write_score_matrix(&dir.join(format!("{}.csv", s.id)), m)?;
        records.push(LabelRecord {
            sequence_id: s.id.clone(),
            label: s.label,
        });
    }
    write_labels(&dir.join("labels.csv"), &records)
}

/// Trains the ensemble on the fitting part of the generated training set and
/// scores the calibration hold-out and the test set.
pub fn score(cfg: &CliConfig, layout: &Layout) -> Result<()> {
    let (manifest, train, test) = load_dataset(layout)?;
    if manifest.spec != cfg.experiment.dataset {
        warn!("dataset settings differ from the manifest; scoring the generated files as they are");
    }
    let (fit_part, holdout) = split_for_calibration(&train, cfg.experiment.calibration_holdout)?;
    let ensemble = train_ensemble(&cfg.experiment.ensembles, fit_part)?;
    write_text(&layout.ensemble(), &ensemble.to_json()?)?;
    for (split, samples) in [(Split::Holdout, holdout), (Split::Test, &test[..])] {
        let matrices = score_samples(&ensemble, samples)?;
        write_score_split(layout, split, samples, &matrices)?;
    }
    println!(
        "trained {} members on {} sequences; scored {} hold-out and {} test sequences",
        ensemble.len(),
        fit_part.len(),
        holdout.len(),
        test.len()
    );
    Ok(())
}

fn same_file(a: &Path, b: &Path) -> bool {
    matches!((a.canonicalize(), b.canonicalize()), (Ok(x), Ok(y)) if x == y)
}

fn copy(from: &Path, to: &Path) -> Result<()> {
    if same_file(from, to) {
        return Ok(());
    }
    fs::copy(from, to).map(|_| ()).map_err(|e| CpdError::io(from, e))
}

/// Validates externally produced score matrices and copies them unchanged
/// into the score directory of `split`.
pub fn import_scores(layout: &Layout, dir: &Path, labels: &Path, split: Split) -> Result<()> {
    let set = read_score_set(dir, labels)?;
    let dest = layout.scores(split);
    fs::create_dir_all(&dest).map_err(|e| CpdError::io(&dest, e))?;
    for id in &set.ids {
        let name = format!("{id}.csv");
        copy(&dir.join(&name), &dest.join(&name))?;
    }
    copy(labels, &dest.join("labels.csv"))?;
    println!(
        "validated {} matrices ({} models each) into {}",
        set.ids.len(),
        set.matrices[0].n_models(),
        dest.display()
    );
    Ok(())
}

fn id_list(ids: &[&str]) -> String {
    const SHOWN: usize = 20;
    let mut s = ids.iter().take(SHOWN).copied().collect::<Vec<_>>().join(", ");
    if ids.len() > SHOWN {
        let _ = write!(s, ", ... ({} in total)", ids.len());
    }
    s
}

fn check_two_classes(set: &ScoreSet) -> Result<()> {
    let has = |c: u8| set.truths.iter().any(|t| t.labels().contains(&c));
    for (class, other) in [(0u8, 1u8), (1, 0)] {
        if !has(other) {
            let ids: Vec<&str> = set.ids.iter().map(String::as_str).collect();
            return Err(CpdError::fit(format!(
                "calibration hold-out only has label {class}; sequences: {}",
                id_list(&ids)
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub kind: CalibrationKind,
    /// Split the ECE values were measured on.
    pub evaluated_on: Split,
    pub n_sequences: usize,
    #[serde(flatten)]
    pub report: CalibrationReport,
}

pub fn calibrate(cfg: &CliConfig, layout: &Layout) -> Result<()> {
    let e = &cfg.experiment;
    let hold = load_scores(layout, Split::Holdout)?;
    if e.calibration != CalibrationKind::None {
        check_two_classes(&hold)?;
    }
    let cals = fit_calibrators(&hold.matrices, &hold.truths, e.calibration, e.clip_epsilon)?;
    let file = CalibratorFile {
        kind: e.calibration,
        clip_epsilon: e.clip_epsilon,
        members: hold.matrices[0]
            .model_ids()
            .iter()
            .zip(&cals)
            .map(|(id, c)| MemberCalibrator {
                model_id: id.clone(),
                calibrator: *c,
            })
            .collect(),
    };
    write_text(&layout.calibrators(), &to_json(&file))?;

    // Report on test when it exists; the hold-out fit is in-sample.
    let (raw, evaluated_on) = if layout.scores(Split::Test).join("labels.csv").exists() {
        (load_scores(layout, Split::Test)?, Split::Test)
    } else {
        (hold, Split::Holdout)
    };
    let mut after = Vec::with_capacity(raw.matrices.len());
    for m in &raw.matrices {
        after.push(ensemble_cpd::experiment::apply_calibrators(
            m,
            &file.for_models(m)?,
        )?);
    }
    let report = pooled_calibration_report(&raw.matrices, &after, &raw.truths, e.ece_bins)?;
    let summary = CalibrationSummary {
        kind: e.calibration,
        evaluated_on,
        n_sequences: raw.ids.len(),
        report,
    };
    write_text(&layout.calibration_report(), &to_json(&summary))?;
    println!(
        "fitted {} {:?} calibrators; ECE on {} {:.4} -> {:.4}",
        file.members.len(),
        e.calibration,
        evaluated_on,
        summary.report.ece_before,
        summary.report.ece_after
    );
    Ok(())
}

/// Writes every configured aggregation's traces and the first alarm at the
/// configured threshold.
pub fn aggregate(cfg: &CliConfig, layout: &Layout) -> Result<()> {
    let test = calibrated(
        layout,
        cfg.experiment.calibration,
        load_scores(layout, Split::Test)?,
    )?;
    let mut out = String::from("aggregation,sequence_id,alarm,tau,has_cp,theta\n");
    for agg in cfg.experiment.aggregations() {
        let name = agg.to_string();
        let traces = traces_for(&test.matrices, &agg)?;
        let dir = layout.traces(&slug(&name));
        let mut alarms = 0;
        for ((id, trace), truth) in test.ids.iter().zip(&traces).zip(&test.truths) {
            write_trace(&dir.join(format!("{id}.csv")), trace)?;
            let d = detect(trace, cfg.threshold)?;
            alarms += usize::from(d.detected());
            let alarm = d.alarm().map(|a| a.to_string()).unwrap_or_default();
            let theta = truth.change_point().map(|c| c.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{name},{id},{alarm},{},{},{theta}",
                d.tau(),
                u8::from(truth.has_change())
            );
        }
        println!(
            "{name:<24} {alarms}/{} sequences alarmed at h = {}",
            traces.len(),
            cfg.threshold
        );
    }
    write_text(&layout.detections(), &out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluatedAggregation {
    #[serde(flatten)]
    pub report: AggregationReport,
    /// `best_f1 - f1_at_fixed`.
    pub gap: f64,
}

impl From<AggregationReport> for EvaluatedAggregation {
    fn from(report: AggregationReport) -> Self {
        Self {
            gap: report.best_f1 - report.f1_at_fixed,
            report,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub protocol: Protocol,
    pub fixed_threshold: f64,
    pub margin: usize,
    pub early_alarm: EarlyAlarm,
    pub calibration_kind: CalibrationKind,
    pub calibration: CalibrationReport,
    pub n_test_sequences: usize,
    pub windows: Vec<usize>,
    pub selected_window: usize,
    /// `None` when there was nothing to select or no hold-out scores.
    pub window_selected_on: Option<Split>,
    pub aggregations: Vec<EvaluatedAggregation>,
    /// One entry per family, the window family at the selected window.
    pub per_family: Vec<EvaluatedAggregation>,
    pub rank_table: RankTable,
}

impl EvaluationReport {
    fn family_reports(&self) -> Vec<AggregationReport> {
        self.per_family.iter().map(|e| e.report.clone()).collect()
    }
}

fn rank_table(cell: &str, reports: &[AggregationReport], protocol: Protocol) -> Result<RankTable> {
    if reports.len() >= 2 {
        return rank_aggregations(&[rank_cell(cell, reports, protocol == Protocol::Fixed)]);
    }
    Ok(RankTable {
        aggregations: reports.iter().map(|r| r.name.clone()).collect(),
        cells: Vec::new(),
        mean_ranks: vec![1.0; reports.len()],
    })
}

pub fn evaluate(cfg: &CliConfig, layout: &Layout) -> Result<()> {
    let e = &cfg.experiment;
    let raw = load_scores(layout, Split::Test)?;
    let raw_matrices = raw.matrices.clone();
    let test = calibrated(layout, e.calibration, raw)?;
    let calibration = pooled_calibration_report(&raw_matrices, &test.matrices, &test.truths, e.ece_bins)?;
    let rules = e.rules();

    let windowed = e.families.iter().any(|f| f.is_windowed());
    let hold_labels = layout.scores(Split::Holdout).join("labels.csv");
    let (selected_window, window_selected_on) = if windowed && e.windows.len() > 1 {
        if hold_labels.exists() {
            let hold = calibrated(layout, e.calibration, load_scores(layout, Split::Holdout)?)?;
            let w = select_window(&hold.matrices, &hold.truths, &e.windows, e.distance, rules)?;
            (w, Some(Split::Holdout))
        } else {
            warn!("no hold-out scores; using the first window size {}", e.windows[0]);
            (e.windows[0], None)
        }
    } else {
        (e.windows[0], None)
    };

    let evaluated = evaluate_aggregations(&test.matrices, &test.truths, &e.aggregations(), rules, None)?;
    let reports: Vec<AggregationReport> = evaluated.into_iter().map(|(r, _)| r).collect();
    let per_family = select_per_family(&reports, selected_window);
    let report = EvaluationReport {
        protocol: cfg.protocol,
        fixed_threshold: FIXED_THRESHOLD,
        margin: rules.margin,
        early_alarm: rules.early_alarm,
        calibration_kind: e.calibration,
        calibration,
        n_test_sequences: test.ids.len(),
        windows: e.windows.clone(),
        selected_window,
        window_selected_on,
        rank_table: rank_table("test", &per_family, cfg.protocol)?,
        aggregations: reports.into_iter().map(Into::into).collect(),
        per_family: per_family.into_iter().map(Into::into).collect(),
    };
    write_text(&layout.report(), &to_json(&report))?;

    if windowed {
        write_plots(cfg, layout, &test, selected_window)?;
    }
    println!("selected window {selected_window}; margin {}", rules.margin);
    for p in &report.per_family {
        println!("{}  gap {:.4}", p.report, p.gap);
    }
    Ok(())
}

fn write_plots(cfg: &CliConfig, layout: &Layout, test: &ScoreSet, window: usize) -> Result<()> {
    let e = &cfg.experiment;
    let rules = e.rules();
    let agg = AggregationFamily::WindowDistance.with(window, e.distance);
    let traces = traces_for(&test.matrices, &agg)?;
    let range = if agg.is_unit_bounded() {
        (0.0, 1.0)
    } else {
        (0.0, traces.iter().flatten().copied().fold(0.0, f64::max))
    };
    let curve = threshold_count_curve(&traces, &test.truths, rules, &cfg.threshold_counts, range)?;
    write_text(
        &layout.plots().join("threshold_count.csv"),
        &format_threshold_count_csv(&curve),
    )?;

    let kinds = [
        DistanceKind::W1,
        DistanceKind::W2,
        DistanceKind::Mmd {
            bandwidth: Bandwidth::MedianHeuristic,
        },
    ];
    let mut sweeps = Vec::new();
    for d in kinds {
        let agg = AggregationFamily::WindowDistance.with(window, d);
        let traces = traces_for(&test.matrices, &agg)?;
        let grid = default_thresholds(&traces, agg.is_unit_bounded());
        sweeps.push((
            d.to_string(),
            sweep_traces(&traces, &test.truths, rules, &grid, FIXED_THRESHOLD)?,
        ));
    }
    let labelled: Vec<(String, _)> = sweeps.iter().map(|(l, s)| (l.clone(), s)).collect();
    write_text(
        &layout.plots().join("distance_curve.csv"),
        &format_distance_curve_csv(&labelled),
    )
}

/// Per-threshold counts and F1 for one aggregation. The window defaults to
/// the one `evaluate` selected, else the first configured size.
pub fn sweep(
    cfg: &CliConfig,
    layout: &Layout,
    family: AggregationFamily,
    window: Option<usize>,
) -> Result<()> {
    let e = &cfg.experiment;
    let window = match window {
        Some(w) => w,
        None if family.is_windowed() && layout.report().exists() => {
            let report: EvaluationReport = read_json(&layout.report())?;
            info!(
                "using the selected window {} from {}",
                report.selected_window,
                layout.report().display()
            );
            report.selected_window
        }
        None => e.windows[0],
    };
    let agg = family.with(window, e.distance);
    agg.validate()?;
    let test = calibrated(layout, e.calibration, load_scores(layout, Split::Test)?)?;
    let traces = traces_for(&test.matrices, &agg)?;
    let rules = e.rules();
    let grid = default_thresholds(&traces, agg.is_unit_bounded());
    let result = sweep_traces(&traces, &test.truths, rules, &grid, FIXED_THRESHOLD)?;
    let counts = counts_per_threshold(&traces, &test.truths, rules, &result.thresholds)?;
    let mut out = String::from("threshold,f1,tp,fp_only,fn_only,fp_fn,tn\n");
    for ((h, f1), c) in result
        .thresholds
        .iter()
        .zip(&result.f1_per_threshold)
        .zip(&counts)
    {
        let _ = writeln!(
            out,
            "{h:?},{f1:?},{},{},{},{},{}",
            c.tp, c.fp_only, c.fn_only, c.fp_fn, c.tn
        );
    }
    let name = agg.to_string();
    write_text(&layout.sweep(&slug(&name)), &out)?;
    println!(
        "{name}: best F1 {:.4} at h = {:.4}; F1 at h = {} {:.4}",
        result.best_f1, result.best_threshold, FIXED_THRESHOLD, result.f1_at_fixed
    );
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankOutput {
    pub protocol: Protocol,
    pub reports: Vec<PathBuf>,
    pub table: RankTable,
}

/// Name of a comparison cell: the directory holding its report.
fn cell_name(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Ranks aggregation families across several `report.json` files.
pub fn rank(cfg: &CliConfig, layout: &Layout, reports: &[PathBuf]) -> Result<()> {
    let mut cells = Vec::with_capacity(reports.len());
    let mut names: Vec<String> = Vec::new();
    for path in reports {
        let report: EvaluationReport = read_json(path)?;
        let mut name = cell_name(path);
        if names.contains(&name) {
            name = path.display().to_string();
        }
        cells.push(rank_cell(
            &name,
            &report.family_reports(),
            cfg.protocol == Protocol::Fixed,
        ));
        names.push(name);
    }
    let table = rank_aggregations(&cells)?;
    let output = RankOutput {
        protocol: cfg.protocol,
        reports: reports.to_vec(),
        table,
    };
    write_text(&layout.rank(), &to_json(&output))?;
    for (name, r) in output.table.aggregations.iter().zip(&output.table.mean_ranks) {
        println!("{name:<20} mean rank {r:.2}");
    }
    Ok(())
}
