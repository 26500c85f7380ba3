// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic at-most-one-change Gaussian datasets.
//!
//! Each sequence draws from its own generator, `rng::stream(seed,
//! NS_DATASET, i)`, with training sequences at indices `0..n_train` and test
//! sequences at `n_train..n_train + n_test`. Within a stream the draws are,
//! in order: the has-change coin, the change point, then the observations
//! row by row.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::cholesky;
use crate::error::{CpdError, Result};
use crate::rng::{self, NS_DATASET};
use crate::score_model::LabeledSequence;

/// A multivariate series, stored row-major (`len` rows of `dim` values).
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    data: Vec<f64>,
    len: usize,
    dim: usize,
}

impl Series {
    pub fn new(data: Vec<f64>, len: usize, dim: usize) -> Result<Self> {
        if len == 0 || dim == 0 {
            return Err(CpdError::shape("series needs at least one row and one column"));
        }
        if data.len() != len * dim {
            return Err(CpdError::shape(format!(
                "series data has {} values, expected {len} x {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CpdError::domain("series contains non-finite values"));
        }
        Ok(Self { data, len, dim })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(CpdError::shape("ragged series rows"));
        }
        Self::new(rows.concat(), rows.len(), dim)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Post-change distribution relative to the pre-change one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ShiftKind {
    MeanShift {
        delta: Vec<f64>,
    },
    /// Multiplies the variance of every coordinate.
    VarianceShift {
        factor: f64,
    },
    /// Equicorrelation `rho` between all coordinate pairs.
    CorrelationShift {
        rho: f64,
    },
}

/// Pre-change `N(pre_mean, pre_cov_scale^2 I)` and the shift applied at the
/// change point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub dimension: usize,
    pub pre_mean: Vec<f64>,
    /// Standard deviation of each coordinate before the change.
    pub pre_cov_scale: f64,
    pub shift: ShiftKind,
}

impl RegimeSpec {
    /// Mean shift of equal size in every coordinate, with total norm
    /// `norm * pre_cov_scale`.
    pub fn mean_shift(dimension: usize, pre_cov_scale: f64, norm: f64) -> Self {
        let per_dim = norm * pre_cov_scale / (dimension as f64).sqrt();
        Self {
            dimension,
            pre_mean: vec![0.0; dimension],
            pre_cov_scale,
            shift: ShiftKind::MeanShift {
                delta: vec![per_dim; dimension],
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dimension;
        if d == 0 {
            return Err(CpdError::config("regime.dimension must be >= 1"));
        }
        if self.pre_mean.len() != d {
            return Err(CpdError::config(format!(
                "regime.pre_mean has {} entries, expected {d}",
                self.pre_mean.len()
            )));
        }
        if !(self.pre_cov_scale.is_finite() && self.pre_cov_scale > 0.0) {
            return Err(CpdError::config("regime.pre_cov_scale must be > 0"));
        }
        match &self.shift {
            ShiftKind::MeanShift { delta } if delta.len() != d => Err(CpdError::config(format!(
                "regime.shift.delta has {} entries, expected {d}",
                delta.len()
            ))),
            ShiftKind::VarianceShift { factor } if !(factor.is_finite() && *factor > 0.0) => {
                Err(CpdError::config("regime.shift.factor must be > 0"))
            }
            ShiftKind::CorrelationShift { rho } => {
                let lower = if d > 1 { -1.0 / (d as f64 - 1.0) } else { -1.0 };
                if !(*rho > lower.max(-1.0) && *rho < 1.0) {
                    return Err(CpdError::config(format!(
                        "regime.shift.rho = {rho} does not give a positive-definite covariance in dimension {d}"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn sampler(&self) -> Result<RegimeSampler> {
        self.validate()?;
        let d = self.dimension;
        let s = self.pre_cov_scale;
        let (post_mean, post_factor) = match &self.shift {
            ShiftKind::MeanShift { delta } => (
                self.pre_mean.iter().zip(delta).map(|(m, dl)| m + dl).collect(),
                None,
            ),
            ShiftKind::VarianceShift { factor } => {
                (self.pre_mean.clone(), Some(PostFactor::Scale(s * factor.sqrt())))
            }
            ShiftKind::CorrelationShift { rho } => {
                let cov: Vec<Vec<f64>> = (0..d)
                    .map(|i| (0..d).map(|j| if i == j { s * s } else { rho * s * s }).collect())
                    .collect();
                let l = cholesky(&cov).ok_or_else(|| {
                    CpdError::config("correlation shift covariance is not positive definite")
                })?;
                (self.pre_mean.clone(), Some(PostFactor::Cholesky(l)))
            }
        };
        Ok(RegimeSampler {
            pre_mean: self.pre_mean.clone(),
            pre_scale: s,
            post_mean,
            post_factor: post_factor.unwrap_or(PostFactor::Scale(s)),
        })
    }
}

enum PostFactor {
    Scale(f64),
    Cholesky(Vec<Vec<f64>>),
}

struct RegimeSampler {
    pre_mean: Vec<f64>,
    pre_scale: f64,
    post_mean: Vec<f64>,
    post_factor: PostFactor,
}

impl RegimeSampler {
    fn draw_row<R: Rng>(&self, rng: &mut R, post: bool, z: &mut [f64], out: &mut Vec<f64>) {
        for v in z.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        if !post {
            out.extend(
                self.pre_mean
                    .iter()
                    .zip(z.iter())
                    .map(|(m, v)| m + self.pre_scale * v),
            );
            return;
        }
        match &self.post_factor {
            PostFactor::Scale(s) => out.extend(self.post_mean.iter().zip(z.iter()).map(|(m, v)| m + s * v)),
            PostFactor::Cholesky(l) => out.extend(
                self.post_mean
                    .iter()
                    .enumerate()
                    .map(|(i, m)| m + (0..=i).map(|k| l[i][k] * z[k]).sum::<f64>()),
            ),
        }
    }
}

/// Dataset shape knobs. Missing fields in a config take the default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub seq_length: usize,
    /// Fraction of training sequences with a change.
    pub cp_fraction: f64,
    /// Fraction of test sequences with a change; defaults to `cp_fraction`.
    #[serde(default)]
    pub test_cp_fraction: Option<f64>,
    /// Inclusive 0-based range the change point is drawn from.
    pub theta_range: [usize; 2],
    pub regime: RegimeSpec,
    pub seed: u64,
}

impl Default for DatasetSpec {
    /// Desk-scale benchmark: D = 8, T = 128, 400 training and 200 test
    /// sequences, half of each containing a mean shift of norm 2 (in units
    /// of the pre-change standard deviation).
    fn default() -> Self {
        Self {
            n_train: 400,
            n_test: 200,
            seq_length: 128,
            cp_fraction: 0.5,
            test_cp_fraction: None,
            theta_range: [32, 112],
            regime: RegimeSpec::mean_shift(8, 1.0, 2.0),
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 && self.n_test == 0 {
            return Err(CpdError::config("n_train and n_test are both 0"));
        }
        if self.seq_length == 0 {
            return Err(CpdError::config("seq_length must be >= 1"));
        }
        for (name, f) in [
            ("cp_fraction", Some(self.cp_fraction)),
            ("test_cp_fraction", self.test_cp_fraction),
        ] {
            if let Some(f) = f {
                if !(0.0..=1.0).contains(&f) {
                    return Err(CpdError::config(format!("{name} = {f} outside [0, 1]")));
                }
            }
        }
        let [lo, hi] = self.theta_range;
        if lo > hi || hi >= self.seq_length {
            return Err(CpdError::config(format!(
                "theta_range = [{lo}, {hi}] must satisfy lo <= hi < seq_length = {}",
                self.seq_length
            )));
        }
        self.regime.validate()
    }

    pub fn test_fraction(&self) -> f64 {
        self.test_cp_fraction.unwrap_or(self.cp_fraction)
    }
}

/// One generated sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub series: Series,
    pub label: LabeledSequence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let sampler = spec.regime.sampler()?;
    let make = |index: usize, train: bool| -> Result<Sample> {
        let mut rng = rng::stream(spec.seed, NS_DATASET, index as u64);
        let fraction = if train {
            spec.cp_fraction
        } else {
            spec.test_fraction()
        };
        let has_cp = rng.random::<f64>() < fraction;
        let [lo, hi] = spec.theta_range;
        let theta = rng.random_range(lo..=hi);
        let change_point = has_cp.then_some(theta);
        let d = spec.regime.dimension;
        let mut z = vec![0.0; d];
        let mut data = Vec::with_capacity(spec.seq_length * d);
        for t in 0..spec.seq_length {
            let post = change_point.is_some_and(|c| t >= c);
            sampler.draw_row(&mut rng, post, &mut z, &mut data);
        }
        let (prefix, local) = if train {
            ("train", index)
        } else {
            ("test", index - spec.n_train)
        };
        Ok(Sample {
            id: format!("{prefix}_{local:05}"),
            series: Series::new(data, spec.seq_length, d)?,
            label: LabeledSequence::new(change_point, spec.seq_length)?,
        })
    };
    let train = (0..spec.n_train)
        .into_par_iter()
        .map(|i| make(i, true))
        .collect::<Result<Vec<_>>>()?;
    let test = (spec.n_train..spec.n_train + spec.n_test)
        .into_par_iter()
        .map(|i| make(i, false))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { train, test })
}
