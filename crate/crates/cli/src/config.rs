// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration: a JSON file plus command-line overrides.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use ensemble_cpd::calibration::CalibrationKind;
use ensemble_cpd::evaluation::EarlyAlarm;
use ensemble_cpd::experiment::ExperimentConfig;
use ensemble_cpd::scorers::{Diversity, EnsembleSpec};
use ensemble_cpd::{AggregationFamily, CpdError, DistanceKind, Result};
use serde::{Deserialize, Serialize};

pub const OUT_ENV: &str = "ENSEMBLE_CPD_OUT";

/// Which F1 ranks aggregations: the best over the threshold grid, or the
/// one at the fixed threshold 0.5.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    #[default]
    Sweep,
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub experiment: ExperimentConfig,
    pub protocol: Protocol,
    /// Decision threshold used by `aggregate`.
    pub threshold: f64,
    /// Threshold counts for the threshold-count plot.
    pub threshold_counts: Vec<usize>,
    pub output_dir: Option<PathBuf>,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentConfig::default(),
            protocol: Protocol::Sweep,
            threshold: 0.5,
            threshold_counts: vec![1, 2, 3, 5, 10, 20, 50, 100, 300],
            output_dir: None,
        }
    }
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CpdError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CpdError::config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.experiment.validate()?;
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(CpdError::config(format!(
                "threshold = {} must lie in [0, 1]",
                self.threshold
            )));
        }
        if self.threshold_counts.is_empty() || self.threshold_counts.contains(&0) {
            return Err(CpdError::config(
                "threshold_counts must be a non-empty list of counts >= 1",
            ));
        }
        Ok(())
    }
}

/// Flags shared by every subcommand. Each mirrors one config key.
#[derive(Args, Debug, Default)]
pub struct Overrides {
    /// JSON config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output root [output_dir]; falls back to $ENSEMBLE_CPD_OUT, then ./out.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Dataset seed [experiment.dataset.seed].
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// [experiment.dataset.n_train]
    #[arg(long, global = true)]
    pub n_train: Option<usize>,
    /// [experiment.dataset.n_test]
    #[arg(long, global = true)]
    pub n_test: Option<usize>,
    /// [experiment.dataset.seq_length]
    #[arg(long, global = true)]
    pub seq_length: Option<usize>,
    /// [experiment.dataset.cp_fraction]
    #[arg(long, global = true)]
    pub cp_fraction: Option<f64>,
    /// Inclusive change-point range as LO,HI [experiment.dataset.theta_range].
    #[arg(long, global = true, value_delimiter = ',')]
    pub theta_range: Option<Vec<usize>>,
    /// Members of a single-group ensemble [experiment.ensembles[0].size].
    #[arg(long, global = true)]
    pub ensemble_size: Option<usize>,
    /// none, beta or temperature [experiment.calibration].
    #[arg(long, global = true)]
    pub calibration: Option<CalibrationKind>,
    /// [experiment.clip_epsilon]
    #[arg(long, global = true)]
    pub clip_epsilon: Option<f64>,
    /// [experiment.calibration_holdout]
    #[arg(long, global = true)]
    pub calibration_holdout: Option<f64>,
    /// [experiment.ece_bins]
    #[arg(long, global = true)]
    pub ece_bins: Option<usize>,
    /// Comma-separated list of mean, min, max, median, wwaggr [experiment.families].
    #[arg(long, global = true, value_delimiter = ',')]
    pub families: Option<Vec<AggregationFamily>>,
    /// Comma-separated window sizes [experiment.windows].
    #[arg(long, global = true, value_delimiter = ',')]
    pub windows: Option<Vec<usize>>,
    /// w1, w2, mmd or mmd:<bandwidth> [experiment.distance].
    #[arg(long, global = true)]
    pub distance: Option<DistanceKind>,
    /// [experiment.margin]
    #[arg(long, global = true)]
    pub margin: Option<usize>,
    /// fp-fn or fp-only [experiment.early_alarm].
    #[arg(long, global = true)]
    pub early_alarm: Option<EarlyAlarm>,
    /// [protocol]
    #[arg(long, global = true, value_enum)]
    pub protocol: Option<Protocol>,
    /// [threshold]
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl Overrides {
    /// Loads the config file (or defaults) and applies the flags on top.
    pub fn resolve(&self) -> Result<CliConfig> {
        let mut c = match &self.config {
            Some(path) => CliConfig::load(path)?,
            None => CliConfig::default(),
        };
        let d = &mut c.experiment.dataset;
        set(&mut d.seed, self.seed);
        set(&mut d.n_train, self.n_train);
        set(&mut d.n_test, self.n_test);
        set(&mut d.seq_length, self.seq_length);
        set(&mut d.cp_fraction, self.cp_fraction);
        if let Some(r) = &self.theta_range {
            let [lo, hi] = r[..] else {
                return Err(CpdError::config("theta_range needs exactly two values, LO,HI"));
            };
            d.theta_range = [lo, hi];
        }
        if let Some(k) = self.ensemble_size {
            resize_ensemble(&mut c.experiment.ensembles, k)?;
        }
        let e = &mut c.experiment;
        set(&mut e.calibration, self.calibration);
        set(&mut e.clip_epsilon, self.clip_epsilon);
        set(&mut e.calibration_holdout, self.calibration_holdout);
        set(&mut e.ece_bins, self.ece_bins);
        set(&mut e.families, self.families.clone());
        set(&mut e.windows, self.windows.clone());
        set(&mut e.distance, self.distance);
        if self.margin.is_some() {
            e.margin = self.margin;
        }
        set(&mut e.early_alarm, self.early_alarm);
        set(&mut c.protocol, self.protocol);
        set(&mut c.threshold, self.threshold);
        if self.out.is_some() {
            c.output_dir = self.out.clone();
        }
        c.validate()?;
        Ok(c)
    }

    /// `--out`, then the environment, then the config, then `./out`.
    pub fn output_root(&self, config: &CliConfig) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .or_else(|| config.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

/// Resizes a single ensemble group, keeping its diversity method and first
/// seed; seeds stay consecutive.
fn resize_ensemble(groups: &mut [EnsembleSpec], size: usize) -> Result<()> {
    let [group] = groups else {
        return Err(CpdError::config(
            "--ensemble-size needs exactly one ensemble group; edit experiment.ensembles instead",
        ));
    };
    if size == 0 {
        return Err(CpdError::config("ensemble size must be >= 1"));
    }
    let first = group.diversity.seeds().first().copied().unwrap_or(0);
    let seeds: Vec<u64> = (0..size as u64).map(|i| first + i).collect();
    group.size = size;
    group.diversity = match &group.diversity {
        Diversity::Naive { .. } => Diversity::Naive { seeds },
        Diversity::Bootstrap { sample_fraction, .. } => Diversity::Bootstrap {
            seeds,
            sample_fraction: *sample_fraction,
        },
        Diversity::NoiseInjection { noise_scale, .. } => Diversity::NoiseInjection {
            seeds,
            noise_scale: *noise_scale,
        },
    };
    Ok(())
}
