// SPDX-License-Identifier: MIT OR Apache-2.0

//! Post-hoc calibration of per-model change-point scores.
//!
//! Beta calibration maps a score `s` to
//! `1 / (1 + (1 - s)^b / s^a * exp(-c))`, which is the logistic function of
//! `a ln s - b ln(1 - s) + c`. Fitting is therefore a three-feature logistic
//! regression on `(ln s, -ln(1 - s), 1)`, solved by damped Newton with
//! `c >= 0` kept as an active-set constraint. Temperature scaling divides
//! the score logit by a single positive temperature.

use serde::{Deserialize, Serialize};

use crate::error::{CpdError, Result};

pub const DEFAULT_CLIP_EPSILON: f64 = 1e-6;
pub const DEFAULT_ECE_BINS: usize = 15;

const GRAD_TOL: f64 = 1e-8;
const MAX_NEWTON_ITERS: usize = 200;
const TEMPERATURE_RANGE: (f64, f64) = (0.01, 100.0);

/// Fitted beta-calibration map.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BetaRaw")]
pub struct BetaCalibrator {
    a: f64,
    b: f64,
    c: f64,
    clip_epsilon: f64,
}

#[derive(Deserialize)]
struct BetaRaw {
    a: f64,
    b: f64,
    c: f64,
    clip_epsilon: f64,
}

impl TryFrom<BetaRaw> for BetaCalibrator {
    type Error = CpdError;

    fn try_from(r: BetaRaw) -> Result<Self> {
        BetaCalibrator::new(r.a, r.b, r.c, r.clip_epsilon)
    }
}

fn check_epsilon(eps: f64) -> Result<()> {
    if eps > 0.0 && eps < 0.5 {
        Ok(())
    } else {
        Err(CpdError::domain(format!(
            "clip_epsilon must lie in (0, 0.5), got {eps}"
        )))
    }
}

impl BetaCalibrator {
    pub fn new(a: f64, b: f64, c: f64, clip_epsilon: f64) -> Result<Self> {
        check_epsilon(clip_epsilon)?;
        if !(a.is_finite() && b.is_finite() && c.is_finite()) {
            return Err(CpdError::domain("beta parameters must be finite"));
        }
        if c < 0.0 {
            return Err(CpdError::domain(format!(
                "beta parameter c must be >= 0, got {c}"
            )));
        }
        Ok(Self {
            a,
            b,
            c,
            clip_epsilon,
        })
    }

    /// `a = b = 1, c = 0`: the identity on clipped scores.
    pub fn identity(clip_epsilon: f64) -> Result<Self> {
        Self::new(1.0, 1.0, 0.0, clip_epsilon)
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn clip_epsilon(&self) -> f64 {
        self.clip_epsilon
    }

    #[inline]
    pub fn apply_one(&self, s: f64) -> f64 {
        let s = clip(s, self.clip_epsilon);
        sigmoid(self.a * s.ln() - self.b * (1.0 - s).ln() + self.c)
    }

    pub fn apply(&self, scores: &[f64]) -> Vec<f64> {
        scores.iter().map(|&s| self.apply_one(s)).collect()
    }
}

/// Fitted temperature-scaling map.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TemperatureRaw")]
pub struct TemperatureCalibrator {
    temperature: f64,
    clip_epsilon: f64,
}

#[derive(Deserialize)]
struct TemperatureRaw {
    temperature: f64,
    #[serde(default = "default_eps")]
    clip_epsilon: f64,
}

fn default_eps() -> f64 {
    DEFAULT_CLIP_EPSILON
}

impl TryFrom<TemperatureRaw> for TemperatureCalibrator {
    type Error = CpdError;

    fn try_from(r: TemperatureRaw) -> Result<Self> {
        TemperatureCalibrator::new(r.temperature, r.clip_epsilon)
    }
}

impl TemperatureCalibrator {
    pub fn new(temperature: f64, clip_epsilon: f64) -> Result<Self> {
        check_epsilon(clip_epsilon)?;
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(CpdError::domain(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(Self {
            temperature,
            clip_epsilon,
        })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    #[inline]
    pub fn apply_one(&self, s: f64) -> f64 {
        sigmoid(logit(clip(s, self.clip_epsilon)) / self.temperature)
    }

    pub fn apply(&self, scores: &[f64]) -> Vec<f64> {
        scores.iter().map(|&s| self.apply_one(s)).collect()
    }
}

/// Any per-model calibration map, in the persisted JSON shape
/// `{"kind": "none" | "beta" | "temperature", ...parameters}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Calibrator {
    #[serde(rename = "none")]
    Identity,
    Beta(BetaCalibrator),
    Temperature(TemperatureCalibrator),
}

impl Calibrator {
    pub fn apply_one(&self, s: f64) -> f64 {
        match self {
            Calibrator::Identity => s,
            Calibrator::Beta(b) => b.apply_one(s),
            Calibrator::Temperature(t) => t.apply_one(s),
        }
    }

    pub fn apply(&self, scores: &[f64]) -> Vec<f64> {
        scores.iter().map(|&s| self.apply_one(s)).collect()
    }
}

/// Which calibration method to fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationKind {
    None,
    #[default]
    Beta,
    Temperature,
}

impl std::str::FromStr for CalibrationKind {
    type Err = CpdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "beta" => Ok(Self::Beta),
            "temperature" => Ok(Self::Temperature),
            other => Err(CpdError::config(format!("unknown calibration {other:?}"))),
        }
    }
}

impl CalibrationKind {
    pub fn fit(self, scores: &[f64], labels: &[u8], clip_epsilon: f64) -> Result<Calibrator> {
        match self {
            CalibrationKind::None => {
                check_inputs(scores, labels)?;
                Ok(Calibrator::Identity)
            }
            CalibrationKind::Beta => fit_beta(scores, labels, clip_epsilon).map(Calibrator::Beta),
            CalibrationKind::Temperature => {
                fit_temperature(scores, labels, clip_epsilon).map(Calibrator::Temperature)
            }
        }
    }
}

#[inline]
fn clip(s: f64, eps: f64) -> f64 {
    s.clamp(eps, 1.0 - eps)
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Cross-entropy of `sigmoid(z)` against `y`, stable for large `|z|`.
#[inline]
pub(crate) fn logistic_loss(z: f64, y: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(CpdError::shape(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !(0.0..=1.0).contains(s)) {
        return Err(CpdError::domain(format!(
            "score at index {i} is {}, outside [0, 1]",
            scores[i]
        )));
    }
    if let Some(i) = labels.iter().position(|&l| l > 1) {
        return Err(CpdError::domain(format!("label at index {i} is not 0/1")));
    }
    Ok(())
}

fn check_fit_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    check_inputs(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(CpdError::fit(format!(
            "labels must contain both classes (got {positives} positives out of {})",
            labels.len()
        )));
    }
    Ok(())
}

/// Mean cross-entropy of the beta map on the given data.
pub fn beta_loss(cal: &BetaCalibrator, scores: &[f64], labels: &[u8]) -> f64 {
    let eps = cal.clip_epsilon;
    scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let s = clip(s, eps);
            logistic_loss(cal.a * s.ln() - cal.b * (1.0 - s).ln() + cal.c, y as f64)
        })
        .sum::<f64>()
        / scores.len() as f64
}

/// Mean cross-entropy of the temperature map on the given data.
pub fn temperature_loss(cal: &TemperatureCalibrator, scores: &[f64], labels: &[u8]) -> f64 {
    temperature_objective(cal.temperature, scores, labels, cal.clip_epsilon)
}

struct LogisticProblem {
    features: Vec<[f64; 3]>,
    labels: Vec<f64>,
}

impl LogisticProblem {
    fn loss(&self, w: &[f64; 3]) -> f64 {
        self.features
            .iter()
            .zip(&self.labels)
            .map(|(x, &y)| logistic_loss(dot(w, x), y))
            .sum::<f64>()
            / self.features.len() as f64
    }

    #[allow(clippy::needless_range_loop)]
    fn grad_hess(&self, w: &[f64; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
        let mut g = [0.0; 3];
        let mut h = [[0.0; 3]; 3];
        for (x, &y) in self.features.iter().zip(&self.labels) {
            let p = sigmoid(dot(w, x));
            let r = p - y;
            let v = p * (1.0 - p);
            for i in 0..3 {
                g[i] += r * x[i];
                for j in 0..=i {
                    h[i][j] += v * x[i] * x[j];
                }
            }
        }
        let n = self.features.len() as f64;
        for i in 0..3 {
            g[i] /= n;
            for j in 0..=i {
                h[i][j] /= n;
                h[j][i] = h[i][j];
            }
        }
        (g, h)
    }

    /// Damped Newton over the coordinates in `free`, the others held fixed.
    fn minimize(&self, mut w: [f64; 3], free: &[usize]) -> [f64; 3] {
        let mut loss = self.loss(&w);
        for _ in 0..MAX_NEWTON_ITERS {
            let (g, h) = self.grad_hess(&w);
            let gf: Vec<f64> = free.iter().map(|&i| g[i]).collect();
            if norm(&gf) <= GRAD_TOL {
                break;
            }
            let hf: Vec<Vec<f64>> = free
                .iter()
                .map(|&i| free.iter().map(|&j| h[i][j]).collect())
                .collect();
            let step = damped_solve(&hf, &gf);
            let mut t = 1.0;
            let mut improved = false;
            while t > 1e-12 {
                let mut cand = w;
                for (k, &i) in free.iter().enumerate() {
                    cand[i] -= t * step[k];
                }
                let cand_loss = self.loss(&cand);
                if cand_loss.is_finite() && cand_loss <= loss {
                    improved = cand_loss < loss || t == 1.0;
                    w = cand;
                    loss = cand_loss;
                    break;
                }
                t *= 0.5;
            }
            if !improved {
                break;
            }
        }
        w
    }
}

#[inline]
fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Solves `(H + lambda I) x = g` by Cholesky, raising `lambda` until the
/// factorisation succeeds.
fn damped_solve(h: &[Vec<f64>], g: &[f64]) -> Vec<f64> {
    let n = g.len();
    let scale = (0..n).map(|i| h[i][i].abs()).fold(0.0, f64::max).max(1e-300);
    let mut lambda = 0.0;
    loop {
        let mut a: Vec<Vec<f64>> = h.to_vec();
        for (i, row) in a.iter_mut().enumerate() {
            row[i] += lambda;
        }
        if let Some(l) = cholesky(&a) {
            // forward / back substitution
            let mut y = vec![0.0; n];
            for i in 0..n {
                let s: f64 = (0..i).map(|k| l[i][k] * y[k]).sum();
                y[i] = (g[i] - s) / l[i][i];
            }
            let mut x = vec![0.0; n];
            for i in (0..n).rev() {
                let s: f64 = ((i + 1)..n).map(|k| l[k][i] * x[k]).sum();
                x[i] = (y[i] - s) / l[i][i];
            }
            return x;
        }
        lambda = if lambda == 0.0 {
            1e-10 * scale
        } else {
            lambda * 10.0
        };
    }
}

pub(crate) fn cholesky(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if d <= 0.0 || !d.is_finite() {
                    return None;
                }
                l[i][i] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

/// Fits `(a, b, c)` by minimising mean cross-entropy on clipped scores.
pub fn fit_beta(scores: &[f64], labels: &[u8], clip_epsilon: f64) -> Result<BetaCalibrator> {
    check_epsilon(clip_epsilon)?;
    check_fit_inputs(scores, labels)?;
    let problem = LogisticProblem {
        features: scores
            .iter()
            .map(|&s| {
                let s = clip(s, clip_epsilon);
                [s.ln(), -(1.0 - s).ln(), 1.0]
            })
            .collect(),
        labels: labels.iter().map(|&l| l as f64).collect(),
    };
    let start = [1.0, 1.0, 0.0];
    let mut w = problem.minimize(start, &[0, 1, 2]);
    if w[2] < 0.0 {
        // The objective is convex, so an infeasible unconstrained optimum puts
        // the constrained one on the face c = 0.
        w[2] = 0.0;
        w = problem.minimize([w[0], w[1], 0.0], &[0, 1]);
        let from_identity = problem.minimize(start, &[0, 1]);
        if problem.loss(&from_identity) < problem.loss(&w) {
            w = from_identity;
        }
    }
    if !w.iter().all(|v| v.is_finite()) {
        return Err(CpdError::fit("beta calibration diverged"));
    }
    if w[0] < 0.0 || w[1] < 0.0 {
        log::warn!(
            "beta calibration fitted a = {:.4}, b = {:.4}; the map may not be monotone",
            w[0],
            w[1]
        );
    }
    BetaCalibrator::new(w[0], w[1], w[2], clip_epsilon)
}

fn temperature_objective(temperature: f64, scores: &[f64], labels: &[u8], eps: f64) -> f64 {
    scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| logistic_loss(logit(clip(s, eps)) / temperature, y as f64))
        .sum::<f64>()
        / scores.len() as f64
}

/// Fits a temperature on `[0.01, 100]` by golden-section search in log space.
pub fn fit_temperature(scores: &[f64], labels: &[u8], clip_epsilon: f64) -> Result<TemperatureCalibrator> {
    check_epsilon(clip_epsilon)?;
    check_fit_inputs(scores, labels)?;
    let f = |log_t: f64| temperature_objective(log_t.exp(), scores, labels, clip_epsilon);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (TEMPERATURE_RANGE.0.ln(), TEMPERATURE_RANGE.1.ln());
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > 1e-9 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    let mut best = 0.5 * (lo + hi);
    // the optimum may sit on the boundary of the search interval
    for edge in [TEMPERATURE_RANGE.0.ln(), TEMPERATURE_RANGE.1.ln()] {
        if f(edge) < f(best) {
            best = edge;
        }
    }
    TemperatureCalibrator::new(best.exp(), clip_epsilon)
}

/// Statistics of one equal-width confidence bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub lower: f64,
    pub upper: f64,
    pub mean_confidence: f64,
    pub empirical_accuracy: f64,
    pub count: usize,
}

/// ECE of one score set together with its per-bin breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EceBreakdown {
    pub ece: f64,
    pub n_bins: usize,
    pub bins: Vec<BinStat>,
}

/// Expected calibration error with `n_bins` equal-width bins on `[0, 1]`;
/// a score of exactly 1 falls in the last bin.
pub fn expected_calibration_error(scores: &[f64], labels: &[u8], n_bins: usize) -> Result<EceBreakdown> {
    check_inputs(scores, labels)?;
    if n_bins == 0 {
        return Err(CpdError::domain("n_bins must be >= 1"));
    }
    let mut conf = vec![0.0; n_bins];
    let mut acc = vec![0.0; n_bins];
    let mut count = vec![0usize; n_bins];
    for (&s, &y) in scores.iter().zip(labels) {
        let b = ((s * n_bins as f64) as usize).min(n_bins - 1);
        conf[b] += s;
        acc[b] += y as f64;
        count[b] += 1;
    }
    let n = scores.len().max(1) as f64;
    let mut ece = 0.0;
    let bins = (0..n_bins)
        .map(|b| {
            let c = count[b];
            let (mc, ma) = if c > 0 {
                (conf[b] / c as f64, acc[b] / c as f64)
            } else {
                (0.0, 0.0)
            };
            ece += c as f64 / n * (ma - mc).abs();
            BinStat {
                lower: b as f64 / n_bins as f64,
                upper: (b + 1) as f64 / n_bins as f64,
                mean_confidence: mc,
                empirical_accuracy: ma,
                count: c,
            }
        })
        .collect();
    Ok(EceBreakdown { ece, n_bins, bins })
}

/// ECE before and after calibration; `per_bin` describes the calibrated scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ece_before: f64,
    pub ece_after: f64,
    pub n_bins: usize,
    pub per_bin: Vec<BinStat>,
}

pub fn calibration_report(
    raw: &[f64],
    calibrated: &[f64],
    labels: &[u8],
    n_bins: usize,
) -> Result<CalibrationReport> {
    if raw.len() != calibrated.len() {
        return Err(CpdError::shape("raw and calibrated scores differ in length"));
    }
    let before = expected_calibration_error(raw, labels, n_bins)?;
    let after = expected_calibration_error(calibrated, labels, n_bins)?;
    Ok(CalibrationReport {
        ece_before: before.ece,
        ece_after: after.ece,
        n_bins,
        per_bin: after.bins,
    })
}
