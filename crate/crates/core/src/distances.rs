// SPDX-License-Identifier: MIT OR Apache-2.0

//! Probabilistic distances between two equally sized 1-D samples.
//!
//! The Wasserstein estimators pair order statistics: both samples are sorted
//! (on copies) and the i-th smallest values are compared. Averages are
//! clamped to the range of the averaged values, so a sample of identical
//! gaps returns that gap exactly.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CpdError, Result};

/// Kernel bandwidth for MMD. Serialized as a number or the string `"median"`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    /// Median of pooled pairwise absolute differences, 1.0 if that is 0.
    MedianHeuristic,
}

impl Serialize for Bandwidth {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Bandwidth::Fixed(v) => s.serialize_f64(*v),
            Bandwidth::MedianHeuristic => s.serialize_str("median"),
        }
    }
}

impl<'de> Deserialize<'de> for Bandwidth {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Bandwidth::Fixed(v)),
            Raw::Text(t) if t == "median" || t == "median-heuristic" => Ok(Bandwidth::MedianHeuristic),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("unknown bandwidth {t:?}"))),
        }
    }
}

/// Which distance compares the history and future windows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DistanceKind {
    #[default]
    W1,
    W2,
    Mmd {
        bandwidth: Bandwidth,
    },
}

impl DistanceKind {
    pub fn validate(&self) -> Result<()> {
        if let DistanceKind::Mmd {
            bandwidth: Bandwidth::Fixed(s),
        } = self
        {
            if !(s.is_finite() && *s > 0.0) {
                return Err(CpdError::domain(format!(
                    "MMD bandwidth must be a positive number, got {s}"
                )));
            }
        }
        Ok(())
    }

    /// True when values on `[0, 1]` inputs are guaranteed to stay in `[0, 1]`.
    pub fn is_unit_bounded(&self) -> bool {
        matches!(self, DistanceKind::W1 | DistanceKind::W2)
    }

    /// Distance between two samples, validating inputs.
    pub fn distance(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        match self {
            DistanceKind::W1 => w1_empirical(x, y),
            DistanceKind::W2 => w2_empirical(x, y),
            DistanceKind::Mmd { bandwidth } => mmd_biased(x, y, *bandwidth),
        }
    }

    /// Distance between two samples that are already sorted ascending and
    /// validated. Used on the aggregation hot path.
    pub(crate) fn distance_sorted(&self, xs: &[f64], ys: &[f64], scratch: &mut Vec<f64>) -> f64 {
        match self {
            DistanceKind::W1 => w1_sorted(xs, ys),
            DistanceKind::W2 => w2_sorted(xs, ys),
            DistanceKind::Mmd { bandwidth } => {
                let sigma = match bandwidth {
                    Bandwidth::Fixed(s) => *s,
                    Bandwidth::MedianHeuristic => median_heuristic_into(xs, ys, scratch),
                };
                mmd_sorted(xs, ys, sigma)
            }
        }
    }

    pub fn label(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistanceKind::W1 => f.write_str("w1"),
            DistanceKind::W2 => f.write_str("w2"),
            DistanceKind::Mmd {
                bandwidth: Bandwidth::MedianHeuristic,
            } => f.write_str("mmd"),
            DistanceKind::Mmd {
                bandwidth: Bandwidth::Fixed(s),
            } => write!(f, "mmd:{s}"),
        }
    }
}

impl FromStr for DistanceKind {
    type Err = CpdError;

    /// Accepts `w1`, `w2`, `mmd`, `mmd:median` and `mmd:<bandwidth>`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let kind = match lower.as_str() {
            "w1" => DistanceKind::W1,
            "w2" => DistanceKind::W2,
            "mmd" | "mmd:median" => DistanceKind::Mmd {
                bandwidth: Bandwidth::MedianHeuristic,
            },
            other => match other.strip_prefix("mmd:") {
                Some(bw) => DistanceKind::Mmd {
                    bandwidth: Bandwidth::Fixed(
                        bw.parse()
                            .map_err(|_| CpdError::config(format!("bad MMD bandwidth {bw:?}")))?,
                    ),
                },
                None => return Err(CpdError::config(format!("unknown distance {s:?}"))),
            },
        };
        kind.validate()?;
        Ok(kind)
    }
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.is_empty() || y.is_empty() {
        return Err(CpdError::domain("distance needs non-empty samples"));
    }
    if x.len() != y.len() {
        return Err(CpdError::shape(format!(
            "samples have lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(CpdError::domain("samples contain NaN"));
    }
    Ok(())
}

fn sorted_copy(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    v
}

/// Empirical 1-Wasserstein distance: the mean absolute gap between paired
/// order statistics of two samples of equal size.
pub fn w1_empirical(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    Ok(w1_sorted(&sorted_copy(x), &sorted_copy(y)))
}

/// Empirical 2-Wasserstein distance (root of the mean squared gap).
pub fn w2_empirical(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    Ok(w2_sorted(&sorted_copy(x), &sorted_copy(y)))
}

/// Biased (V-statistic) MMD with a Gaussian RBF kernel.
pub fn mmd_biased(x: &[f64], y: &[f64], bandwidth: Bandwidth) -> Result<f64> {
    check_pair(x, y)?;
    DistanceKind::Mmd { bandwidth }.validate()?;
    let (xs, ys) = (sorted_copy(x), sorted_copy(y));
    let sigma = match bandwidth {
        Bandwidth::Fixed(s) => s,
        Bandwidth::MedianHeuristic => median_heuristic_into(&xs, &ys, &mut Vec::new()),
    };
    Ok(mmd_sorted(&xs, &ys, sigma))
}

/// Median-heuristic bandwidth for the pooled sample.
pub fn median_heuristic(x: &[f64], y: &[f64]) -> f64 {
    median_heuristic_into(x, y, &mut Vec::new())
}

/// Mean of `f(a_i, b_i)` clamped to the range of those values.
#[inline]
fn bounded_mean(xs: &[f64], ys: &[f64], f: impl Fn(f64, f64) -> f64) -> f64 {
    let (mut sum, mut lo, mut hi) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
    for (&a, &b) in xs.iter().zip(ys) {
        let v = f(a, b);
        sum += v;
        lo = if v < lo { v } else { lo };
        hi = if v > hi { v } else { hi };
    }
    if xs.is_empty() {
        return 0.0;
    }
    (sum / xs.len() as f64).clamp(lo, hi)
}

#[inline]
pub(crate) fn w1_sorted(xs: &[f64], ys: &[f64]) -> f64 {
    debug_assert_eq!(xs.len(), ys.len());
    bounded_mean(xs, ys, |a, b| (a - b).abs())
}

#[inline]
pub(crate) fn w2_sorted(xs: &[f64], ys: &[f64]) -> f64 {
    debug_assert_eq!(xs.len(), ys.len());
    bounded_mean(xs, ys, |a, b| (a - b) * (a - b)).sqrt()
}

fn kernel_mean(a: &[f64], b: &[f64], inv_two_sigma_sq: f64) -> f64 {
    let mut sum = 0.0;
    for &u in a {
        for &v in b {
            let d = u - v;
            sum += (-d * d * inv_two_sigma_sq).exp();
        }
    }
    sum / (a.len() * b.len()) as f64
}

fn mmd_sorted(xs: &[f64], ys: &[f64], sigma: f64) -> f64 {
    if xs == ys {
        return 0.0;
    }
    let g = 1.0 / (2.0 * sigma * sigma);
    let sq = kernel_mean(xs, xs, g) + kernel_mean(ys, ys, g) - 2.0 * kernel_mean(xs, ys, g);
    sq.max(0.0).sqrt()
}

fn median_heuristic_into(x: &[f64], y: &[f64], scratch: &mut Vec<f64>) -> f64 {
    scratch.clear();
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    for i in 0..pooled.len() {
        for j in (i + 1)..pooled.len() {
            scratch.push((pooled[i] - pooled[j]).abs());
        }
    }
    if scratch.is_empty() {
        return 1.0;
    }
    let n = scratch.len();
    let mid = n / 2;
    let (_, hi, _) = scratch.select_nth_unstable_by(mid, f64::total_cmp);
    let hi = *hi;
    let median = if n % 2 == 1 {
        hi
    } else {
        let lo = scratch[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}
