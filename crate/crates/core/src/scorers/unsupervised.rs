// SPDX-License-Identifier: MIT OR Apache-2.0

//! Training-free scorers over two adjacent windows of `w` rows each:
//! `A = [t - 2w + 1, t - w]` and `B = [t - w + 1, t]`.

use rand_distr::{Distribution, StandardNormal};

use super::features::{first_scored, PrefixStats};
use crate::error::{CpdError, Result};
use crate::rng::{self, NS_SCORER_INIT};
use crate::score_model::transform_unsupervised_value;
use crate::synthgen::Series;

const VAR_FLOOR: f64 = 1e-8;

pub(crate) fn check_length(series: &Series, window: usize) -> Result<()> {
    if window == 0 {
        return Err(CpdError::config("feature_window must be >= 1"));
    }
    if series.len() < 2 * window {
        return Err(CpdError::domain(format!(
            "series length {} is shorter than 2 * feature_window = {}",
            series.len(),
            2 * window
        )));
    }
    Ok(())
}

/// Root mean square over dimensions of the Welch statistic between the
/// window means, squashed by `2 / (1 + exp(-sharpness * z)) - 1`.
///
/// `z >= 0`, so a constant series maps to exactly 0.
pub(crate) fn window_stat(series: &Series, window: usize, sharpness: f64) -> Result<Vec<f64>> {
    check_length(series, window)?;
    let d = series.dim();
    let stats = PrefixStats::new(series);
    let (mut ma, mut va) = (vec![0.0; d], vec![0.0; d]);
    let (mut mb, mut vb) = (vec![0.0; d], vec![0.0; d]);
    let w = window as f64;
    let mut out = vec![0.0; first_scored(window)];
    for t in first_scored(window)..series.len() {
        let b0 = t + 1 - window;
        stats.window(b0 - window, b0, &mut ma, &mut va);
        stats.window(b0, t + 1, &mut mb, &mut vb);
        let mut z2 = 0.0;
        for j in 0..d {
            let diff = mb[j] - ma[j];
            z2 += diff * diff / ((va[j] + vb[j]) / w + VAR_FLOOR);
        }
        let z = (z2 / d as f64).sqrt();
        out.push((2.0 / (1.0 + (-sharpness * z).exp()) - 1.0).clamp(0.0, 1.0));
    }
    Ok(out)
}

/// Row-major `embed_dim x 2D` Gaussian projection drawn from `seed`.
pub(crate) fn projection(seed: u64, embed_dim: usize, dim: usize) -> Vec<f64> {
    let mut rng = rng::stream(seed, NS_SCORER_INIT, 0);
    (0..embed_dim * 2 * dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect()
}

/// Cosine similarity clamped to [-1, 1]. Equal vectors give exactly 1;
/// a zero vector against a non-zero one gives 0.
pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        return 1.0;
    }
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0)
}

/// Embeds each window as `R [means, stds]` and scores the cosine between the
/// two embeddings with the unsupervised transform.
pub(crate) fn cosine_projection(
    series: &Series,
    window: usize,
    projection: &[f64],
    embed_dim: usize,
) -> Result<Vec<f64>> {
    check_length(series, window)?;
    let d = series.dim();
    if projection.len() != embed_dim * 2 * d {
        return Err(CpdError::shape(format!(
            "projection has {} entries, expected {embed_dim} x {}",
            projection.len(),
            2 * d
        )));
    }
    let stats = PrefixStats::new(series);
    let (mut mean, mut var) = (vec![0.0; d], vec![0.0; d]);
    let mut feat = vec![0.0; 2 * d];
    let (mut ea, mut eb) = (vec![0.0; embed_dim], vec![0.0; embed_dim]);
    let mut embed = |a: usize, b: usize, out: &mut [f64]| {
        stats.window(a, b, &mut mean, &mut var);
        feat[..d].copy_from_slice(&mean);
        for (f, v) in feat[d..].iter_mut().zip(&var) {
            *f = v.sqrt();
        }
        for (i, o) in out.iter_mut().enumerate() {
            let r = &projection[i * 2 * d..(i + 1) * 2 * d];
            *o = r.iter().zip(&feat).map(|(x, y)| x * y).sum();
        }
    };
    let mut out = vec![0.0; first_scored(window)];
    for t in first_scored(window)..series.len() {
        let b0 = t + 1 - window;
        embed(b0 - window, b0, &mut ea);
        embed(b0, t + 1, &mut eb);
        out.push(transform_unsupervised_value(cosine(&ea, &eb)));
    }
    Ok(out)
}
