// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::synthgen::Series;

/// Per-dimension prefix sums for O(D) window means and variances.
pub(crate) struct PrefixStats {
    dim: usize,
    sum: Vec<f64>,
    sumsq: Vec<f64>,
}

impl PrefixStats {
    pub(crate) fn new(series: &Series) -> Self {
        let d = series.dim();
        let mut sum = vec![0.0; (series.len() + 1) * d];
        let mut sumsq = vec![0.0; (series.len() + 1) * d];
        for t in 0..series.len() {
            let row = series.row(t);
            for j in 0..d {
                sum[(t + 1) * d + j] = sum[t * d + j] + row[j];
                sumsq[(t + 1) * d + j] = sumsq[t * d + j] + row[j] * row[j];
            }
        }
        Self { dim: d, sum, sumsq }
    }

    /// Mean and (population) variance of rows `[a, b)` in every dimension.
    pub(crate) fn window(&self, a: usize, b: usize, mean: &mut [f64], var: &mut [f64]) {
        let d = self.dim;
        let n = (b - a) as f64;
        for j in 0..d {
            let s = self.sum[b * d + j] - self.sum[a * d + j];
            let q = self.sumsq[b * d + j] - self.sumsq[a * d + j];
            let m = s / n;
            mean[j] = m;
            var[j] = (q / n - m * m).max(0.0);
        }
    }
}

/// Index of the first step with a full pair of feature windows.
#[inline]
pub(crate) fn first_scored(window: usize) -> usize {
    2 * window - 1
}
