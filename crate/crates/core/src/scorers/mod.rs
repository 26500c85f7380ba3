// SPDX-License-Identifier: MIT OR Apache-2.0

//! Lightweight base scorers and ensemble construction.
//!
//! Three scorer kinds are available: a two-window Welch statistic, a
//! supervised logistic model, and a random-projection cosine score. An
//! ensemble is built from one or more [`EnsembleSpec`]s, each expanding a
//! base spec into K members that differ by seed and diversity strategy.

mod features;
mod logistic;
mod unsupervised;

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CpdError, Result};
use crate::score_model::{EnsembleScoreMatrix, ScoreSequence};
use crate::synthgen::{Sample, Series};

pub use logistic::LogisticModel;
use logistic::{FeatureTable, LogisticParams, TrainingVariation};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ScorerKind {
    WindowStat {
        feature_window: usize,
        sharpness: f64,
    },
    Logistic {
        feature_window: usize,
        learning_rate: f64,
        epochs: usize,
        seed: u64,
    },
    CosineProjection {
        embed_dim: usize,
        feature_window: usize,
        seed: u64,
    },
}

impl ScorerKind {
    pub fn feature_window(&self) -> usize {
        match *self {
            Self::WindowStat { feature_window, .. }
            | Self::Logistic { feature_window, .. }
            | Self::CosineProjection { feature_window, .. } => feature_window,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::WindowStat { .. } => "window_stat",
            Self::Logistic { .. } => "logistic",
            Self::CosineProjection { .. } => "cosine_projection",
        }
    }

    fn with_seed(&self, seed: u64) -> Self {
        let mut k = self.clone();
        match &mut k {
            Self::Logistic { seed: s, .. } | Self::CosineProjection { seed: s, .. } => *s = seed,
            Self::WindowStat { .. } => {}
        }
        k
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerSpec {
    #[serde(flatten)]
    pub kind: ScorerKind,
    /// Exponent `gamma` of the `s -> s^gamma` warp applied to every output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub miscalibration: Option<f64>,
}

impl ScorerSpec {
    pub fn window_stat(feature_window: usize, sharpness: f64) -> Self {
        Self::from(ScorerKind::WindowStat {
            feature_window,
            sharpness,
        })
    }

    pub fn logistic(feature_window: usize, learning_rate: f64, epochs: usize) -> Self {
        Self::from(ScorerKind::Logistic {
            feature_window,
            learning_rate,
            epochs,
            seed: 0,
        })
    }

    pub fn cosine_projection(embed_dim: usize, feature_window: usize) -> Self {
        Self::from(ScorerKind::CosineProjection {
            embed_dim,
            feature_window,
            seed: 0,
        })
    }

    pub fn with_miscalibration(mut self, gamma: f64) -> Self {
        self.miscalibration = Some(gamma);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.feature_window() == 0 {
            return Err(CpdError::config("feature_window must be >= 1"));
        }
        match self.kind {
            ScorerKind::WindowStat { sharpness, .. } if !(sharpness.is_finite() && sharpness > 0.0) => {
                return Err(CpdError::config("sharpness must be > 0"))
            }
            ScorerKind::Logistic { learning_rate, .. }
                if !(learning_rate.is_finite() && learning_rate > 0.0) =>
            {
                return Err(CpdError::config("learning_rate must be > 0"))
            }
            ScorerKind::CosineProjection { embed_dim: 0, .. } => {
                return Err(CpdError::config("embed_dim must be >= 1"))
            }
            _ => {}
        }
        if let Some(g) = self.miscalibration {
            check_gamma(g)?;
        }
        Ok(())
    }
}

impl From<ScorerKind> for ScorerSpec {
    fn from(kind: ScorerKind) -> Self {
        Self {
            kind,
            miscalibration: None,
        }
    }
}

/// How ensemble members are made to differ.
///
/// The member seed replaces the base spec's seed. Bootstrap and noise
/// injection change training and so only affect logistic members; for the
/// training-free kinds they behave like `Naive`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum Diversity {
    Naive { seeds: Vec<u64> },
    Bootstrap { seeds: Vec<u64>, sample_fraction: f64 },
    NoiseInjection { seeds: Vec<u64>, noise_scale: f64 },
}

impl Diversity {
    pub fn seeds(&self) -> &[u64] {
        match self {
            Self::Naive { seeds } | Self::Bootstrap { seeds, .. } | Self::NoiseInjection { seeds, .. } => {
                seeds
            }
        }
    }

    fn variation(&self) -> TrainingVariation {
        match *self {
            Self::Naive { .. } => TrainingVariation::Naive,
            Self::Bootstrap { sample_fraction, .. } => TrainingVariation::Bootstrap { sample_fraction },
            Self::NoiseInjection { noise_scale, .. } => TrainingVariation::NoiseInjection { noise_scale },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub base: ScorerSpec,
    pub size: usize,
    pub diversity: Diversity,
}

impl EnsembleSpec {
    /// `size` members seeded `first_seed, first_seed + 1, ...`.
    pub fn naive(base: ScorerSpec, size: usize, first_seed: u64) -> Self {
        Self {
            base,
            size,
            diversity: Diversity::Naive {
                seeds: (0..size as u64).map(|i| first_seed + i).collect(),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.size == 0 {
            return Err(CpdError::config("ensemble size must be >= 1"));
        }
        let n = self.diversity.seeds().len();
        if n != self.size {
            return Err(CpdError::config(format!(
                "ensemble size is {} but {n} seeds were given",
                self.size
            )));
        }
        match self.diversity {
            Diversity::Bootstrap { sample_fraction, .. }
                if !(sample_fraction > 0.0 && sample_fraction <= 1.0) =>
            {
                Err(CpdError::config("sample_fraction must lie in (0, 1]"))
            }
            Diversity::NoiseInjection { noise_scale, .. }
                if !(noise_scale.is_finite() && noise_scale >= 0.0) =>
            {
                Err(CpdError::config("noise_scale must be >= 0"))
            }
            _ => Ok(()),
        }
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma.is_finite() && gamma > 0.0 {
        Ok(())
    } else {
        Err(CpdError::config(format!(
            "miscalibration gamma = {gamma} must be > 0"
        )))
    }
}

/// `s -> s^gamma` elementwise.
pub fn apply_miscalibration(scores: &ScoreSequence, gamma: f64) -> Result<ScoreSequence> {
    check_gamma(gamma)?;
    Ok(ScoreSequence::from_trusted(
        scores.as_slice().iter().map(|s| s.powf(gamma)).collect(),
    ))
}

pub fn score_window_stat(series: &Series, feature_window: usize, sharpness: f64) -> Result<ScoreSequence> {
    ScorerSpec::window_stat(feature_window, sharpness).validate()?;
    Ok(ScoreSequence::from_trusted(unsupervised::window_stat(
        series,
        feature_window,
        sharpness,
    )?))
}

pub fn score_cosine_projection(
    series: &Series,
    embed_dim: usize,
    feature_window: usize,
    seed: u64,
) -> Result<ScoreSequence> {
    let fitted = FittedScorer::fit_unsupervised(
        ScorerSpec::from(ScorerKind::CosineProjection {
            embed_dim,
            feature_window,
            seed,
        }),
        series.dim(),
    )?;
    fitted.score(series)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FittedModel {
    WindowStat,
    Logistic(LogisticModel),
    CosineProjection {
        /// Row-major `embed_dim x 2D` matrix.
        projection: Vec<f64>,
    },
}

/// A scorer ready to score series: its resolved spec plus learned state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedScorer {
    pub id: String,
    pub spec: ScorerSpec,
    pub model: FittedModel,
}

impl FittedScorer {
    fn fit_unsupervised(spec: ScorerSpec, dim: usize) -> Result<Self> {
        spec.validate()?;
        let model = match spec.kind {
            ScorerKind::WindowStat { .. } => FittedModel::WindowStat,
            ScorerKind::CosineProjection { embed_dim, seed, .. } => FittedModel::CosineProjection {
                projection: unsupervised::projection(seed, embed_dim, dim),
            },
            ScorerKind::Logistic { .. } => return Err(CpdError::fit("logistic scorer needs training data")),
        };
        Ok(Self {
            id: spec.kind.name().to_string(),
            spec,
            model,
        })
    }

    pub fn score(&self, series: &Series) -> Result<ScoreSequence> {
        let window = self.spec.kind.feature_window();
        unsupervised::check_length(series, window)?;
        let raw = match (&self.model, &self.spec.kind) {
            (FittedModel::WindowStat, ScorerKind::WindowStat { sharpness, .. }) => {
                unsupervised::window_stat(series, window, *sharpness)?
            }
            (FittedModel::Logistic(m), ScorerKind::Logistic { .. }) => m.score(series)?,
            (
                FittedModel::CosineProjection { projection },
                ScorerKind::CosineProjection { embed_dim, .. },
            ) => unsupervised::cosine_projection(series, window, projection, *embed_dim)?,
            _ => {
                return Err(CpdError::config(format!(
                    "scorer {} has a model that does not match its spec",
                    self.id
                )))
            }
        };
        let scores = ScoreSequence::new(raw)?;
        match self.spec.miscalibration {
            Some(g) => apply_miscalibration(&scores, g),
            None => Ok(scores),
        }
    }
}

/// Fitted ensemble members in a fixed order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub members: Vec<FittedScorer>,
}

struct MemberPlan {
    id: String,
    spec: ScorerSpec,
    variation: TrainingVariation,
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn score_matrix(&self, series: &Series) -> Result<EnsembleScoreMatrix> {
        let rows = self
            .members
            .iter()
            .map(|m| m.score(series))
            .collect::<Result<Vec<_>>>()?;
        EnsembleScoreMatrix::with_ids(rows, self.members.iter().map(|m| m.id.clone()).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| CpdError::config(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let e: Self = serde_json::from_str(text).map_err(|e| CpdError::config(e.to_string()))?;
        for m in &e.members {
            m.spec.validate()?;
        }
        Ok(e)
    }
}

/// Trains every member of the concatenated ensembles on `train`.
///
/// Members train in parallel; logistic members sharing a feature window
/// share one feature table.
pub fn train_ensemble(specs: &[EnsembleSpec], train: &[Sample]) -> Result<Ensemble> {
    if specs.is_empty() {
        return Err(CpdError::config("no ensemble specs given"));
    }
    let dim = train
        .first()
        .map(|s| s.series.dim())
        .ok_or_else(|| CpdError::fit("empty training set"))?;
    let mut plans = Vec::new();
    for (g, spec) in specs.iter().enumerate() {
        spec.validate()?;
        let variation = spec.diversity.variation();
        for (i, &seed) in spec.diversity.seeds().iter().enumerate() {
            let member = ScorerSpec {
                kind: spec.base.kind.with_seed(seed),
                miscalibration: spec.base.miscalibration,
            };
            plans.push(MemberPlan {
                id: format!("g{g}_{}_{i}", spec.base.kind.name()),
                spec: member,
                variation,
            });
        }
    }

    let mut tables: HashMap<usize, FeatureTable> = HashMap::new();
    for p in &plans {
        if let ScorerKind::Logistic { feature_window, .. } = p.spec.kind {
            if let std::collections::hash_map::Entry::Vacant(e) = tables.entry(feature_window) {
                e.insert(FeatureTable::build(train, feature_window)?);
            }
        }
    }

    let members = plans
        .into_par_iter()
        .map(|p| match p.spec.kind {
            ScorerKind::Logistic {
                feature_window,
                learning_rate,
                epochs,
                seed,
            } => {
                let params = LogisticParams {
                    window: feature_window,
                    learning_rate,
                    epochs,
                    seed,
                };
                let model = logistic::train(&tables[&feature_window], &params, p.variation)?;
                Ok(FittedScorer {
                    id: p.id,
                    spec: p.spec,
                    model: FittedModel::Logistic(model),
                })
            }
            _ => {
                let mut f = FittedScorer::fit_unsupervised(p.spec, dim)?;
                f.id = p.id;
                Ok(f)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Ensemble { members })
}

/// Mean training cross-entropy of a logistic member; `None` for other kinds.
pub fn training_loss(scorer: &FittedScorer, train: &[Sample]) -> Result<Option<f64>> {
    match &scorer.model {
        FittedModel::Logistic(m) => Ok(Some(m.loss(&FeatureTable::build(train, m.window)?))),
        _ => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate, DatasetSpec, RegimeSpec};

    fn constant(len: usize, dim: usize, v: f64) -> Series {
        Series::new(vec![v; len * dim], len, dim).unwrap()
    }

    fn step(len: usize, dim: usize, theta: usize, jump: f64, seed: u64) -> Series {
        use rand::Rng;
        let mut rng = crate::rng::stream(seed, crate::rng::NS_MISC, 0);
        let data = (0..len * dim)
            .map(|i| {
                let t = i / dim;
                let base = if t >= theta { jump } else { 0.0 };
                base + (rng.random::<f64>() - 0.5) * 0.2
            })
            .collect();
        Series::new(data, len, dim).unwrap()
    }

    /// Probability that a random positive outranks a random negative.
    fn auc(scores: &[f64], labels: &[u8]) -> f64 {
        let pos: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == 1)
            .map(|(s, _)| *s)
            .collect();
        let neg: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == 0)
            .map(|(s, _)| *s)
            .collect();
        let mut wins = 0.0;
        for p in &pos {
            for n in &neg {
                wins += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        wins / (pos.len() * neg.len()) as f64
    }

    fn small_data(seed: u64) -> crate::synthgen::Dataset {
        generate(&DatasetSpec {
            n_train: 80,
            n_test: 40,
            seq_length: 96,
            theta_range: [30, 80],
            regime: RegimeSpec::mean_shift(4, 1.0, 3.0),
            seed,
            ..DatasetSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn window_stat_constant_series_is_zero() {
        let s = score_window_stat(&constant(40, 3, 2.5), 4, 1.0).unwrap();
        assert!(s.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn window_stat_fires_on_large_shift() {
        let s = score_window_stat(&step(80, 2, 40, 1.0, 1), 5, 1.0).unwrap();
        let peak = s.as_slice()[38..52].iter().cloned().fold(0.0, f64::max);
        assert!(peak > 0.9, "{peak}");
        assert!(s.as_slice()[..9].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_series_is_domain_error() {
        let err = score_window_stat(&constant(7, 1, 0.0), 4, 1.0).unwrap_err();
        assert!(matches!(err, CpdError::Domain(_)));
        let err = score_cosine_projection(&constant(7, 1, 0.0), 3, 4, 0).unwrap_err();
        assert!(matches!(err, CpdError::Domain(_)));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(unsupervised::cosine(&[1.0, 2.0], &[1.0, 2.0]), 1.0);
        assert_eq!(unsupervised::cosine(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert_eq!(crate::score_model::transform_unsupervised_value(0.0), 1.0);
        let anti = unsupervised::cosine(&[1.0, 1.0], &[-1.0, -0.5]);
        assert!(anti < 0.0);
        assert_eq!(crate::score_model::transform_unsupervised_value(anti), 0.0);
        // A periodic series has identical adjacent windows.
        let rows: Vec<Vec<f64>> = (0..40).map(|t| vec![(t % 2) as f64, 1.0]).collect();
        let s = score_cosine_projection(&Series::from_rows(&rows).unwrap(), 6, 4, 3).unwrap();
        assert!(
            s.as_slice().iter().all(|&v| v.abs() < 1e-12),
            "{:?}",
            s.as_slice()
        );
    }

    #[test]
    fn miscalibration_examples() {
        let s = ScoreSequence::new(vec![0.0, 0.5, 0.9, 1.0]).unwrap();
        assert_eq!(apply_miscalibration(&s, 1.0).unwrap(), s);
        assert_eq!(apply_miscalibration(&s, 2.0).unwrap().as_slice()[1], 0.25);
        assert!(apply_miscalibration(&s, 0.0).is_err());
        assert!(apply_miscalibration(&s, f64::NAN).is_err());
    }

    #[test]
    fn logistic_separates_held_out_steps() {
        let ds = small_data(11);
        let spec = EnsembleSpec::naive(ScorerSpec::logistic(6, 0.1, 5), 1, 0);
        let ens = train_ensemble(&[spec], &ds.train).unwrap();
        let (mut scores, mut labels) = (Vec::new(), Vec::new());
        for s in &ds.test {
            let sc = ens.members[0].score(&s.series).unwrap();
            for t in features::first_scored(6)..s.series.len() {
                scores.push(sc.as_slice()[t]);
                labels.push(s.label.label_at(t));
            }
        }
        let a = auc(&scores, &labels);
        assert!(a > 0.9, "auc = {a}");
    }

    #[test]
    fn naive_members_differ() {
        let ds = small_data(12);
        let spec = EnsembleSpec::naive(ScorerSpec::logistic(6, 0.1, 2), 10, 0);
        let ens = train_ensemble(&[spec], &ds.train).unwrap();
        let m = ens.score_matrix(&ds.test[0].series).unwrap();
        let corr = |x: &[f64], y: &[f64]| {
            let n = x.len() as f64;
            let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
            let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
            for (a, b) in x.iter().zip(y) {
                sxy += (a - mx) * (b - my);
                sxx += (a - mx).powi(2);
                syy += (b - my).powi(2);
            }
            sxy / (sxx * syy).sqrt()
        };
        let mut max_corr: f64 = -1.0;
        for i in 0..10 {
            for j in i + 1..10 {
                max_corr = max_corr.max(corr(m.row(i).as_slice(), m.row(j).as_slice()));
            }
        }
        assert!(max_corr < 1.0, "{max_corr}");
        assert_ne!(ens.members[0].model, ens.members[1].model);
    }

    #[test]
    fn bootstrap_is_deterministic() {
        let ds = small_data(13);
        let spec = EnsembleSpec {
            base: ScorerSpec::logistic(6, 0.1, 2),
            size: 2,
            diversity: Diversity::Bootstrap {
                seeds: vec![7, 7],
                sample_fraction: 1.0,
            },
        };
        let a = train_ensemble(std::slice::from_ref(&spec), &ds.train).unwrap();
        let b = train_ensemble(&[spec], &ds.train).unwrap();
        assert_eq!(a.members[0].model, a.members[1].model);
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_training_set_is_fit_error() {
        let mut ds = small_data(14);
        ds.train.retain(|s| s.label.has_change());
        let spec = EnsembleSpec::naive(ScorerSpec::logistic(6, 0.1, 1), 1, 0);
        assert!(matches!(
            train_ensemble(&[spec], &ds.train),
            Err(CpdError::Fit(_))
        ));
    }

    #[test]
    fn ensemble_validation() {
        let mut spec = EnsembleSpec::naive(ScorerSpec::window_stat(4, 1.0), 3, 0);
        spec.size = 4;
        assert!(spec.validate().is_err());
        let spec = EnsembleSpec::naive(ScorerSpec::window_stat(0, 1.0), 1, 0);
        assert!(spec.validate().is_err());
        let spec = EnsembleSpec::naive(ScorerSpec::cosine_projection(0, 4), 1, 0);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn json_round_trip_scores_identically() {
        let ds = small_data(15);
        let specs = [
            EnsembleSpec::naive(ScorerSpec::logistic(6, 0.1, 1), 2, 0),
            EnsembleSpec::naive(ScorerSpec::cosine_projection(8, 5), 2, 10),
            EnsembleSpec::naive(ScorerSpec::window_stat(5, 0.5).with_miscalibration(2.0), 1, 0),
        ];
        let ens = train_ensemble(&specs, &ds.train).unwrap();
        let back = Ensemble::from_json(&ens.to_json().unwrap()).unwrap();
        assert_eq!(back, ens);
        let s = &ds.test[3].series;
        assert_eq!(back.score_matrix(s).unwrap(), ens.score_matrix(s).unwrap());
        assert_eq!(ens.score_matrix(s).unwrap().n_models(), 5);
    }

    #[test]
    fn naive_spread_peaks_at_change() {
        // Across-member variance at the change point exceeds the variance deep
        // inside the pre-change region, pooled over 20 dataset seeds.
        let (mut at_cp, mut pre) = (0.0, 0.0);
        for seed in 0..20 {
            let ds = generate(&DatasetSpec {
                n_train: 60,
                n_test: 20,
                seq_length: 96,
                cp_fraction: 0.5,
                test_cp_fraction: Some(1.0),
                theta_range: [48, 70],
                regime: RegimeSpec::mean_shift(4, 1.0, 2.0),
                seed: 100 + seed,
            })
            .unwrap();
            let spec = EnsembleSpec::naive(ScorerSpec::logistic(6, 0.1, 2), 10, seed * 10);
            let ens = train_ensemble(&[spec], &ds.train).unwrap();
            for s in &ds.test {
                let m = ens.score_matrix(&s.series).unwrap();
                let theta = s.label.change_point().unwrap();
                let var = |t: usize| {
                    let col: Vec<f64> = (0..m.n_models()).map(|k| m.get(k, t)).collect();
                    let mu = col.iter().sum::<f64>() / col.len() as f64;
                    col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / col.len() as f64
                };
                at_cp += var(theta);
                pre += var(20);
            }
        }
        assert!(at_cp > pre, "at change {at_cp:.3e}, pre-change {pre:.3e}");
    }
}
