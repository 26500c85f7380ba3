// SPDX-License-Identifier: MIT OR Apache-2.0

//! Supervised logistic scorer.
//!
//! Features at step `t` compare the recent window `[t - w + 1, t]` with the
//! reference window `[0, w)` at the start of the series:
//!
//! * per-dimension mean difference (D features),
//! * log ratio of the dimension-averaged variances,
//! * Euclidean norm of the mean-difference vector.
//!
//! Features are standardised with training-set moments. Steps before
//! `2w - 1` score 0.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::features::{first_scored, PrefixStats};
use crate::calibration::{logistic_loss, sigmoid};
use crate::error::{CpdError, Result};
use crate::rng::{self, NS_BOOTSTRAP, NS_SCORER_INIT, NS_SCORER_TRAIN};
use crate::synthgen::{Sample, Series};

const BATCH: usize = 64;
const VAR_FLOOR: f64 = 1e-9;

pub(crate) fn n_features(dim: usize) -> usize {
    dim + 2
}

/// Writes the feature rows for every scored step of `series` into `out`.
pub(crate) fn features(series: &Series, window: usize, out: &mut Vec<f64>) {
    let d = series.dim();
    let stats = PrefixStats::new(series);
    let (mut ref_mean, mut ref_var) = (vec![0.0; d], vec![0.0; d]);
    let (mut mean, mut var) = (vec![0.0; d], vec![0.0; d]);
    stats.window(0, window, &mut ref_mean, &mut ref_var);
    let ref_v = ref_var.iter().sum::<f64>() / d as f64;
    for t in first_scored(window)..series.len() {
        stats.window(t + 1 - window, t + 1, &mut mean, &mut var);
        let mut norm = 0.0;
        for j in 0..d {
            let diff = mean[j] - ref_mean[j];
            norm += diff * diff;
            out.push(diff);
        }
        let v = var.iter().sum::<f64>() / d as f64;
        out.push(((v + VAR_FLOOR) / (ref_v + VAR_FLOOR)).ln());
        out.push(norm.sqrt());
    }
}

/// Feature rows and step labels for a training collection.
pub(crate) struct FeatureTable {
    pub(crate) n_features: usize,
    pub(crate) rows: Vec<f64>,
    pub(crate) labels: Vec<u8>,
    /// `[start, end)` row range of each sequence.
    pub(crate) spans: Vec<(usize, usize)>,
}

impl FeatureTable {
    pub(crate) fn build(samples: &[Sample], window: usize) -> Result<Self> {
        let dim = samples
            .first()
            .map(|s| s.series.dim())
            .ok_or_else(|| CpdError::fit("empty training set"))?;
        let nf = n_features(dim);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut spans = Vec::with_capacity(samples.len());
        for s in samples {
            if s.series.dim() != dim {
                return Err(CpdError::shape(format!(
                    "sequence {} has dimension {}, expected {dim}",
                    s.id,
                    s.series.dim()
                )));
            }
            if s.series.len() < 2 * window {
                return Err(CpdError::domain(format!(
                    "sequence {} has length {} < 2 * window = {}",
                    s.id,
                    s.series.len(),
                    2 * window
                )));
            }
            let start = labels.len();
            features(&s.series, window, &mut rows);
            labels.extend((first_scored(window)..s.series.len()).map(|t| s.label.label_at(t)));
            spans.push((start, labels.len()));
        }
        Ok(Self {
            n_features: nf,
            rows,
            labels,
            spans,
        })
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.n_features..(i + 1) * self.n_features]
    }
}

/// How one member's training run differs from the others.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum TrainingVariation {
    Naive,
    Bootstrap { sample_fraction: f64 },
    NoiseInjection { noise_scale: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub window: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
}

impl LogisticModel {
    pub(crate) fn score(&self, series: &Series) -> Result<Vec<f64>> {
        if n_features(series.dim()) != self.weights.len() {
            return Err(CpdError::shape(format!(
                "model expects dimension {}, series has {}",
                self.weights.len() - 2,
                series.dim()
            )));
        }
        let mut rows = Vec::new();
        features(series, self.window, &mut rows);
        let nf = self.weights.len();
        let mut out = vec![0.0; first_scored(self.window)];
        out.extend(rows.chunks_exact(nf).map(|x| sigmoid(self.logit(x))));
        Ok(out)
    }

    #[inline]
    fn logit(&self, x: &[f64]) -> f64 {
        let mut z = self.bias;
        for (i, &v) in x.iter().enumerate() {
            z += self.weights[i] * (v - self.feature_mean[i]) / self.feature_scale[i];
        }
        z
    }

    /// Mean cross-entropy over a feature table.
    pub(crate) fn loss(&self, table: &FeatureTable) -> f64 {
        (0..table.labels.len())
            .map(|i| logistic_loss(self.logit(table.row(i)), table.labels[i] as f64))
            .sum::<f64>()
            / table.labels.len().max(1) as f64
    }
}

pub(crate) struct LogisticParams {
    pub window: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

/// Mini-batch SGD on the standardised features.
///
/// The member seed drives weight initialisation (`NS_SCORER_INIT`), the
/// visiting order and injected noise (`NS_SCORER_TRAIN`), and bootstrap
/// resampling of whole sequences (`NS_BOOTSTRAP`). Noise injection adds
/// `N(0, noise_scale^2 * learning_rate)` to every parameter after each step.
pub(crate) fn train(
    table: &FeatureTable,
    params: &LogisticParams,
    variation: TrainingVariation,
) -> Result<LogisticModel> {
    let has_pos = table.spans.iter().any(|&(a, b)| table.labels[a..b].contains(&1));
    let has_neg_seq = table.spans.iter().any(|&(a, b)| !table.labels[a..b].contains(&1));
    if !has_pos || !has_neg_seq {
        return Err(CpdError::fit(
            "logistic scorer needs at least one sequence with a change and one without",
        ));
    }
    if !(params.learning_rate.is_finite() && params.learning_rate > 0.0) {
        return Err(CpdError::config("learning_rate must be > 0"));
    }
    let nf = table.n_features;
    let n = table.labels.len();
    let mut feature_mean = vec![0.0; nf];
    let mut feature_scale = vec![0.0; nf];
    for i in 0..n {
        for (m, v) in feature_mean.iter_mut().zip(table.row(i)) {
            *m += v;
        }
    }
    feature_mean.iter_mut().for_each(|m| *m /= n as f64);
    for i in 0..n {
        for (j, v) in table.row(i).iter().enumerate() {
            feature_scale[j] += (v - feature_mean[j]).powi(2);
        }
    }
    feature_scale
        .iter_mut()
        .for_each(|s| *s = (*s / n as f64).sqrt().max(1e-12));

    let mut init = rng::stream(params.seed, NS_SCORER_INIT, 0);
    let init_dist = Normal::new(0.0, 0.1).expect("valid normal");
    let mut model = LogisticModel {
        window: params.window,
        weights: (0..nf).map(|_| init_dist.sample(&mut init)).collect(),
        bias: init_dist.sample(&mut init),
        feature_mean,
        feature_scale,
    };

    let mut order: Vec<usize> = match variation {
        TrainingVariation::Bootstrap { sample_fraction } => {
            if !(sample_fraction > 0.0 && sample_fraction <= 1.0) {
                return Err(CpdError::config("bootstrap sample_fraction must lie in (0, 1]"));
            }
            let mut boot = rng::stream(params.seed, NS_BOOTSTRAP, 0);
            let n_seq = table.spans.len();
            let draws = ((sample_fraction * n_seq as f64).round() as usize).max(1);
            (0..draws)
                .flat_map(|_| {
                    let (a, b) = table.spans[boot.random_range(0..n_seq)];
                    a..b
                })
                .collect()
        }
        _ => (0..n).collect(),
    };
    let noise = match variation {
        TrainingVariation::NoiseInjection { noise_scale } => {
            if !(noise_scale.is_finite() && noise_scale >= 0.0) {
                return Err(CpdError::config("noise_scale must be >= 0"));
            }
            Some(
                Normal::new(0.0, noise_scale * params.learning_rate.sqrt())
                    .map_err(|e| CpdError::config(e.to_string()))?,
            )
        }
        _ => None,
    };

    let mut rng = rng::stream(params.seed, NS_SCORER_TRAIN, 0);
    let mut grad = vec![0.0; nf];
    for _ in 0..params.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(BATCH) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut grad_b = 0.0;
            for &i in batch {
                let x = table.row(i);
                let r = sigmoid(model.logit(x)) - table.labels[i] as f64;
                for j in 0..nf {
                    grad[j] += r * (x[j] - model.feature_mean[j]) / model.feature_scale[j];
                }
                grad_b += r;
            }
            let step = params.learning_rate / batch.len() as f64;
            for (w, g) in model.weights.iter_mut().zip(&grad) {
                *w -= step * g;
            }
            model.bias -= step * grad_b;
            if let Some(dist) = &noise {
                for w in model.weights.iter_mut() {
                    *w += dist.sample(&mut rng);
                }
                model.bias += dist.sample(&mut rng);
            }
        }
    }
    if !model.weights.iter().all(|w| w.is_finite()) || !model.bias.is_finite() {
        return Err(CpdError::fit("logistic scorer training diverged"));
    }
    Ok(model)
}
