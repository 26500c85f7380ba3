// SPDX-License-Identifier: MIT OR Apache-2.0

//! Where each artifact lives under the output root, and how to read it back.
//!
//! ```text
//! dataset/manifest.json          sequences, splits and labels
//! dataset/series/<id>.csv        one series per sequence
//! dataset/labels.csv
//! model/ensemble.json
//! scores/{holdout,test}/<id>.csv score matrices
//! scores/{holdout,test}/labels.csv
//! calibration/calibrators.json
//! calibration/report.json
//! traces/<aggregation>/<id>.csv
//! detections.csv
//! report.json
//! plots/threshold_count.csv
//! plots/distance_curve.csv
//! sweeps/<aggregation>.csv
//! rank.json
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use ensemble_cpd::calibration::{CalibrationKind, Calibrator};
use ensemble_cpd::experiment::apply_calibrators;
use ensemble_cpd::io::{read_labels, read_score_matrix, read_series};
use ensemble_cpd::synthgen::{DatasetSpec, Sample};
use ensemble_cpd::{CpdError, EnsembleScoreMatrix, LabeledSequence, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Holdout,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Holdout => "holdout",
            Split::Test => "test",
        })
    }
}

pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: PathBuf) -> Self {
        Self { root }
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn manifest(&self) -> PathBuf {
        self.dataset().join("manifest.json")
    }

    pub fn ensemble(&self) -> PathBuf {
        self.root.join("model").join("ensemble.json")
    }

    pub fn scores(&self, split: Split) -> PathBuf {
        self.root.join("scores").join(split.to_string())
    }

    pub fn calibrators(&self) -> PathBuf {
        self.root.join("calibration").join("calibrators.json")
    }

    pub fn calibration_report(&self) -> PathBuf {
        self.root.join("calibration").join("report.json")
    }

    pub fn traces(&self, aggregation: &str) -> PathBuf {
        self.root.join("traces").join(aggregation)
    }

    pub fn detections(&self) -> PathBuf {
        self.root.join("detections.csv")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }

    pub fn sweep(&self, aggregation: &str) -> PathBuf {
        self.root.join("sweeps").join(format!("{aggregation}.csv"))
    }

    pub fn rank(&self) -> PathBuf {
        self.root.join("rank.json")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSplit {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: DataSplit,
    /// Relative to the dataset directory.
    pub series: String,
    pub length: usize,
    pub change_point: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub n_train: usize,
    pub n_test: usize,
    pub sequences: Vec<ManifestEntry>,
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CpdError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CpdError::parse(path, e.to_string()))
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("artifact types serialize");
    s.push('\n');
    s
}

/// Loads the generated samples listed in a manifest, train then test.
pub fn load_dataset(layout: &Layout) -> Result<(Manifest, Vec<Sample>, Vec<Sample>)> {
    let manifest: Manifest = read_json(&layout.manifest())?;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for e in &manifest.sequences {
        let path = layout.dataset().join(&e.series);
        let series = read_series(&path)?;
        if series.len() != e.length {
            return Err(CpdError::shape(format!(
                "{}: {} rows, manifest says {}",
                path.display(),
                series.len(),
                e.length
            )));
        }
        let sample = Sample {
            id: e.id.clone(),
            series,
            label: LabeledSequence::new(e.change_point, e.length)?,
        };
        match e.split {
            DataSplit::Train => train.push(sample),
            DataSplit::Test => test.push(sample),
        }
    }
    Ok((manifest, train, test))
}

/// Score matrices of one split with their labels, in label-file order.
pub struct ScoreSet {
    pub ids: Vec<String>,
    pub matrices: Vec<EnsembleScoreMatrix>,
    pub truths: Vec<LabeledSequence>,
}

/// Reads `labels` and the `<id>.csv` matrix next to it for every row,
/// checking lengths and that all matrices have the same models.
pub fn read_score_set(dir: &Path, labels: &Path) -> Result<ScoreSet> {
    let records = read_labels(labels)?;
    if records.is_empty() {
        return Err(CpdError::shape(format!("{}: no sequences", labels.display())));
    }
    let mut set = ScoreSet {
        ids: Vec::new(),
        matrices: Vec::new(),
        truths: Vec::new(),
    };
    for r in records {
        let path = dir.join(format!("{}.csv", r.sequence_id));
        let m = read_score_matrix(&path)?;
        if m.len() != r.label.len() {
            return Err(CpdError::shape(format!(
                "{}: {} columns, labels say length {}",
                path.display(),
                m.len(),
                r.label.len()
            )));
        }
        if let Some(first) = set.matrices.first() {
            if m.n_models() != first.n_models() {
                return Err(CpdError::shape(format!(
                    "{}: {} rows, expected {} like {}",
                    path.display(),
                    m.n_models(),
                    first.n_models(),
                    set.ids[0]
                )));
            }
        }
        set.ids.push(r.sequence_id);
        set.matrices.push(m);
        set.truths.push(r.label);
    }
    Ok(set)
}

pub fn load_scores(layout: &Layout, split: Split) -> Result<ScoreSet> {
    let dir = layout.scores(split);
    read_score_set(&dir, &dir.join("labels.csv"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberCalibrator {
    pub model_id: String,
    pub calibrator: Calibrator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibratorFile {
    pub kind: CalibrationKind,
    pub clip_epsilon: f64,
    pub members: Vec<MemberCalibrator>,
}

impl CalibratorFile {
    /// Calibrators in the row order of `matrix`, matched by model id.
    pub fn for_models(&self, matrix: &EnsembleScoreMatrix) -> Result<Vec<Calibrator>> {
        matrix
            .model_ids()
            .iter()
            .map(|id| {
                self.members
                    .iter()
                    .find(|m| &m.model_id == id)
                    .map(|m| m.calibrator)
                    .ok_or_else(|| CpdError::shape(format!("no calibrator for model {id:?}")))
            })
            .collect()
    }
}

/// Applies the stored calibrators when the config asks for calibration.
pub fn calibrated(layout: &Layout, kind: CalibrationKind, mut set: ScoreSet) -> Result<ScoreSet> {
    if kind == CalibrationKind::None {
        return Ok(set);
    }
    let path = layout.calibrators();
    if !path.exists() {
        return Err(CpdError::io(
            &path,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "calibration is enabled but no calibrators were fitted; run `calibrate` first",
            ),
        ));
    }
    let file: CalibratorFile = read_json(&path)?;
    if file.kind != kind {
        return Err(CpdError::config(format!(
            "{} holds {:?} calibrators but the config asks for {:?}",
            path.display(),
            file.kind,
            kind
        )));
    }
    for m in &mut set.matrices {
        let cals = file.for_models(m)?;
        *m = apply_calibrators(m, &cals)?;
    }
    Ok(set)
}

/// File-name-safe form of an aggregation name.
pub fn slug(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}
