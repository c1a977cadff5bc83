//! Metrics, Hamming utilities, theory-verification experiments and
//! parameter sweeps.

use std::hint::black_box;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{
    calibrate_threshold, decode_dict, decode_sign, embed, embed_batch, inner_products_batch, inner_products_raw, oracle_watermark,
    score, Dictionary,
};
use crate::distortions::{apply, blur, Distortion, DistortionSpec};
use crate::error::{Error, Result};
use crate::loss::{MarginLoss, PopulationCurve};
use crate::lowdim::LowDimModel;
use crate::stats::{median, normal_cdf};
use crate::tensor::{
    dot, norm_sq, psnr, sample_uniform_message, ImageTensor, Message, SeededRng, ValueRange,
};
use crate::trainer::{feasible_ball_radius, train, uniform_deviation_bound, TrainConfig, WatermarkSet};

/// Trials per parallel work unit.
const TRIAL_CHUNK: usize = 256;

/// Fraction of matching bits.
pub fn bit_accuracy(decoded: &Message, truth: &Message) -> Result<f64> {
    if decoded.len() != truth.len() {
        return Err(Error::BitCountMismatch {
            expected: truth.len(),
            actual: decoded.len(),
        });
    }
    let hits = decoded
        .bits()
        .iter()
        .zip(truth.bits())
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Number of differing positions; extra trailing bits count as differences.
pub fn hamming(a: &Message, b: &Message) -> usize {
    let common = a.bits().iter().zip(b.bits()).filter(|(x, y)| x != y).count();
    common + a.len().abs_diff(b.len())
}

/// Minimum pairwise Hamming distance; `K + 1` for fewer than two messages.
pub fn d_min(messages: &[Message]) -> usize {
    let k = messages.first().map_or(0, Message::len);
    let mut best = k + 1;
    for (i, a) in messages.iter().enumerate() {
        for b in &messages[i + 1..] {
            best = best.min(hamming(a, b));
        }
    }
    best
}

/// Random dictionary of `size` messages whose minimum distance is exactly
/// `target`. The first pair sits at distance `target`; the rest are drawn by
/// rejection.
pub fn random_dictionary(
    bits: usize,
    size: usize,
    target: usize,
    rng: &mut SeededRng,
) -> Result<Dictionary> {
    if size < 2 || target == 0 || target > bits {
        return Err(Error::param(
            "size",
            "need at least two messages and 1 ≤ d_min ≤ K",
        ));
    }
    let first = sample_uniform_message(bits, rng)?;
    let mut second = first.bits().to_vec();
    for idx in sample_indices(rng, bits, target) {
        second[idx] = -second[idx];
    }
    let mut msgs = vec![first, Message::new(second)?];
    let mut attempts = 0usize;
    while msgs.len() < size {
        attempts += 1;
        if attempts > 1_000_000 {
            return Err(Error::param(
                "size",
                format!("could not place {size} messages at distance {target} in {bits} bits"),
            ));
        }
        let cand = sample_uniform_message(bits, rng)?;
        if msgs.iter().all(|m| hamming(m, &cand) >= target) {
            msgs.push(cand);
        }
    }
    Dictionary::new(msgs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Null,
    Watermarked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSample {
    pub score: f64,
    pub label: Label,
    pub message: Option<Message>,
}

impl ScoreSample {
    pub fn null(score: f64) -> Self {
        Self {
            score,
            label: Label::Null,
            message: None,
        }
    }

    pub fn watermarked(score: f64, message: Message) -> Self {
        Self {
            score,
            label: Label::Watermarked,
            message: Some(message),
        }
    }
}

fn class_counts(samples: &[ScoreSample]) -> Result<(usize, usize)> {
    let pos = samples.iter().filter(|s| s.label == Label::Watermarked).count();
    let neg = samples.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidValue(
            "ROC metrics need at least one sample of each label".into(),
        ));
    }
    if samples.iter().any(|s| s.score.is_nan()) {
        return Err(Error::InvalidValue("NaN score".into()));
    }
    Ok((pos, neg))
}

/// Mann–Whitney AUROC with ties counted one half.
pub fn auroc(samples: &[ScoreSample]) -> Result<f64> {
    let (pos, neg) = class_counts(samples)?;
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.sort_by(|&a, &b| samples[a].score.total_cmp(&samples[b].score));
    // midranks, doubled so they stay integral
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && samples[idx[j + 1]].score == samples[idx[i]].score {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u128;
        for &t in &idx[i..=j] {
            if samples[t].label == Label::Watermarked {
                rank_sum2 += twice_mid;
            }
        }
        i = j + 1;
    }
    let p = pos as u128;
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2.0 * pos as f64 * neg as f64))
}

/// ROC staircase from the highest threshold down; tied scores form one step.
pub fn roc_curve(samples: &[ScoreSample]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = class_counts(samples)?;
    let mut sorted: Vec<&ScoreSample> = samples.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut curve = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].score;
        while i < sorted.len() && sorted[i].score == s {
            match sorted[i].label {
                Label::Watermarked => tp += 1,
                Label::Null => fp += 1,
            }
            i += 1;
        }
        curve.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(curve)
}

/// Trapezoidal area under a curve of `(x, y)` points.
pub fn trapezoid_area(curve: &[(f64, f64)]) -> f64 {
    curve
        .windows(2)
        .map(|p| (p[1].0 - p[0].0) * (p[1].1 + p[0].1) * 0.5)
        .sum()
}

/// Positive rate of `scores` strictly above `threshold`.
pub fn exceed_rate(scores: &[f64], threshold: f64) -> f64 {
    scores.iter().filter(|s| **s > threshold).count() as f64 / scores.len() as f64
}

/// A named tolerance check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub passed: bool,
}

impl Check {
    pub fn at_most(name: &str, value: f64, limit: f64) -> Self {
        Self {
            name: name.to_string(),
            value,
            limit,
            passed: value <= limit,
        }
    }

    pub fn at_least(name: &str, value: f64, limit: f64) -> Self {
        Self {
            name: name.to_string(),
            value,
            limit,
            passed: value >= limit,
        }
    }

    pub fn within(name: &str, value: f64, lo: f64, hi: f64) -> Self {
        Self {
            name: name.to_string(),
            value,
            limit: if value < lo { lo } else { hi },
            passed: (lo..=hi).contains(&value),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub r_star: Option<f64>,
    pub mu: Option<f64>,
    pub sigma: Option<f64>,
    /// `max_k ‖Π_U w_k‖`.
    pub max_subspace_leak: Option<f64>,
    /// `max_k ‖Π_U w_k‖ / ‖w_k‖`.
    pub max_relative_leak: Option<f64>,
    pub max_pairwise_cos: Option<f64>,
    /// `max_k |‖w_k‖² − r★|`.
    pub radius_error: Option<f64>,
    /// `max_k |‖w_k‖² − r★| / r★`.
    pub relative_radius_error: Option<f64>,
    pub min_norm_sq: Option<f64>,
    pub max_norm: Option<f64>,
    pub eps_n_delta: Option<f64>,
    pub threshold: Option<f64>,
    pub empirical_fpr: Option<f64>,
    pub empirical_tpr: Option<f64>,
    pub empirical_ba: Option<f64>,
    pub predicted_ba: Option<f64>,
    pub dictionary_ba: Option<f64>,
    pub dictionary_ba_bound: Option<f64>,
    pub dictionary_threshold: Option<f64>,
    pub dictionary_fpr: Option<f64>,
    pub dictionary_tpr: Option<f64>,
    pub checks: Vec<Check>,
    pub skipped: Vec<String>,
}

impl TheoryReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    /// Merges another report's populated fields and checks into this one.
    pub fn merge(&mut self, other: TheoryReport) {
        macro_rules! take {
            ($($f:ident),*) => { $( if other.$f.is_some() { self.$f = other.$f; } )* };
        }
        take!(
            r_star, mu, sigma, max_subspace_leak, max_relative_leak, max_pairwise_cos,
            radius_error, relative_radius_error, min_norm_sq, max_norm, eps_n_delta, threshold,
            empirical_fpr, empirical_tpr, empirical_ba, predicted_ba, dictionary_ba,
            dictionary_ba_bound, dictionary_threshold, dictionary_fpr, dictionary_tpr
        );
        self.checks.extend(other.checks);
        self.skipped.extend(other.skipped);
    }
}

/// Tolerances for the geometry diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryTolerances {
    pub relative_leak: f64,
    pub pairwise_cos: f64,
    pub relative_radius: f64,
}

impl Default for GeometryTolerances {
    fn default() -> Self {
        Self {
            relative_leak: 0.15,
            pairwise_cos: 0.15,
            relative_radius: 0.20,
        }
    }
}

/// Geometry of `w` relative to the model: subspace leakage, mutual
/// coherence, radius error against `r★`, and the deviation bound at
/// `(n, δ)`.
pub fn verify_geometry(
    w: &WatermarkSet,
    model: &LowDimModel,
    curve: &PopulationCurve,
    n: usize,
    delta: f64,
    tol: &GeometryTolerances,
) -> Result<TheoryReport> {
    if w.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            actual: w.dim(),
        });
    }
    let r_star = curve.solve_r_star()?.r_star;
    let k = w.bits();
    let norms = w.norms_sq();
    let mut leak = 0.0f64;
    let mut rel_leak = 0.0f64;
    for (v, nsq) in w.vectors().iter().zip(&norms) {
        let l = norm_sq(&model.project_onto_u(v)?).sqrt();
        leak = leak.max(l);
        rel_leak = rel_leak.max(if *nsq > 0.0 { l / nsq.sqrt() } else { 0.0 });
    }
    let mut cos = 0.0f64;
    for i in 0..k {
        for j in 0..i {
            let d = (norms[i] * norms[j]).sqrt();
            if d > 0.0 {
                cos = cos.max((dot(w.vector(i), w.vector(j)) / d).abs());
            }
        }
    }
    let radius_error = norms.iter().map(|r| (r - r_star).abs()).fold(0.0, f64::max);
    let min_norm_sq = norms.iter().cloned().fold(f64::INFINITY, f64::min);
    let radius = feasible_ball_radius(k, curve.loss, curve.beta);
    let eps = uniform_deviation_bound(
        n,
        delta,
        k,
        curve.loss.lipschitz(),
        radius,
        model.trace_sigma_x(),
    )?;
    let rel_radius = radius_error / r_star;
    Ok(TheoryReport {
        r_star: Some(r_star),
        max_subspace_leak: Some(leak),
        max_relative_leak: Some(rel_leak),
        max_pairwise_cos: Some(cos),
        radius_error: Some(radius_error),
        relative_radius_error: Some(rel_radius),
        min_norm_sq: Some(min_norm_sq),
        max_norm: Some(norms.iter().cloned().fold(0.0, f64::max).sqrt()),
        eps_n_delta: Some(eps),
        checks: vec![
            Check::at_most("relative_subspace_leak", rel_leak, tol.relative_leak),
            Check::at_most("pairwise_cosine", cos, tol.pairwise_cos),
            Check::at_most("relative_radius_error", rel_radius, tol.relative_radius),
            Check::at_least("nontrivial_min_norm_sq", min_norm_sq, r_star / 2.0),
        ],
        ..TheoryReport::default()
    })
}

/// Draws `trials` null and `trials` watermarked inner-product vectors in
/// parallel. The closure receives a per-trial stream.
fn par_trials<T: Send>(
    trials: usize,
    rng: &SeededRng,
    f: impl Fn(&mut SeededRng) -> T + Sync,
) -> Vec<T> {
    let chunks: Vec<usize> = (0..trials.div_ceil(TRIAL_CHUNK)).collect();
    chunks
        .par_iter()
        .flat_map_iter(|&c| {
            let mut r = rng.derive(c as u64);
            let len = TRIAL_CHUNK.min(trials - c * TRIAL_CHUNK);
            (0..len).map(|_| f(&mut r)).collect::<Vec<_>>()
        })
        .collect()
}

/// Monte-Carlo detection experiment under the low-dimensional model.
///
/// A threshold is calibrated at level `alpha` on an independent null batch
/// and applied to fresh null and watermarked batches of `trials` each.
/// Messages are uniform, or uniform over `dict` when one is given.
pub fn verify_detection(
    w: &WatermarkSet,
    model: &LowDimModel,
    alpha: f64,
    trials: usize,
    dict: Option<&Dictionary>,
    rng: &mut SeededRng,
) -> Result<TheoryReport> {
    if w.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            actual: w.dim(),
        });
    }
    if trials == 0 {
        return Err(Error::param("trials", "must be at least 1"));
    }
    if let Some(d) = dict {
        if d.bits() != w.bits() {
            return Err(Error::BitCountMismatch {
                expected: w.bits(),
                actual: d.bits(),
            });
        }
    }
    let k = w.bits();
    let gram: Vec<f64> = (0..k * k)
        .map(|i| dot(w.vector(i / k), w.vector(i % k)))
        .collect();
    let null_gamma = |r: &mut SeededRng| inner_products_raw(&model.sample_one(r).x, w);

    let calib = rng.fork(rng.stream_id().wrapping_add(1));
    let null_rng = rng.fork(rng.stream_id().wrapping_add(2));
    let alt_rng = rng.fork(rng.stream_id().wrapping_add(3));

    let calib_gamma = par_trials(trials, &calib, null_gamma);
    let fresh_gamma = par_trials(trials, &null_rng, null_gamma);
    let alt: Vec<(Vec<f64>, Message)> = par_trials(trials, &alt_rng, |r| {
        let mut g = null_gamma(r);
        let m = match dict {
            Some(d) => d.messages()[r.random_range(0..d.len())].clone(),
            None => sample_uniform_message(k, r).expect("k >= 1"),
        };
        for (i, gi) in g.iter_mut().enumerate() {
            *gi += (0..k).map(|j| gram[i * k + j] * m.bit(j)).sum::<f64>();
        }
        (g, m)
    });

    let s_of = |gs: &[Vec<f64>], d: Option<&Dictionary>| -> Result<Vec<f64>> {
        gs.iter().map(|g| score(g, d)).collect()
    };
    let alt_gamma: Vec<Vec<f64>> = alt.iter().map(|(g, _)| g.clone()).collect();

    let threshold = calibrate_threshold(&s_of(&calib_gamma, None)?, alpha)?;
    let fpr = exceed_rate(&s_of(&fresh_gamma, None)?, threshold);
    let tpr = exceed_rate(&s_of(&alt_gamma, None)?, threshold);
    let mut ba = 0.0;
    for (g, m) in &alt {
        ba += bit_accuracy(&decode_sign(g), m)?;
    }
    ba /= trials as f64;

    let sigma_eps = model.sigma_eps();
    let norms = w.norms_sq();
    let mu = norms.iter().sum::<f64>() / k as f64;
    let sigma = sigma_eps * mu.sqrt();
    let predicted = (0..k)
        .map(|j| {
            let var = model.quad_form(w.vector(j), w.vector(j));
            if var > 0.0 {
                normal_cdf(norms[j] / var.sqrt())
            } else if norms[j] > 0.0 {
                1.0
            } else {
                0.5
            }
        })
        .sum::<f64>()
        / k as f64;

    let mut report = TheoryReport {
        mu: Some(mu),
        sigma: Some(sigma),
        threshold: Some(threshold),
        empirical_fpr: Some(fpr),
        empirical_tpr: Some(tpr),
        empirical_ba: Some(ba),
        predicted_ba: Some(predicted),
        ..TheoryReport::default()
    };
    // calibration and test batches each contribute binomial variance
    let band = 3.0 * (2.0 * alpha * (1.0 - alpha) / trials as f64).sqrt();
    report
        .checks
        .push(Check::within("fpr_at_calibrated_threshold", fpr, alpha - band, alpha + band));
    report
        .checks
        .push(Check::within("sign_bit_accuracy", ba, predicted - 0.01, predicted + 0.01));

    if let Some(d) = dict {
        let dt = calibrate_threshold(&s_of(&calib_gamma, Some(d))?, alpha)?;
        report.dictionary_threshold = Some(dt);
        report.dictionary_fpr = Some(exceed_rate(&s_of(&fresh_gamma, Some(d))?, dt));
        report.dictionary_tpr = Some(exceed_rate(&s_of(&alt_gamma, Some(d))?, dt));
        let mut dba = 0.0;
        for (g, m) in &alt {
            dba += bit_accuracy(&decode_dict(g, d)?, m)?;
        }
        dba /= trials as f64;
        report.dictionary_ba = Some(dba);
        if sigma > 0.0 {
            let bound = 1.0
                - (d.len() as f64 - 1.0) * normal_cdf(-(mu / sigma) * (d.d_min() as f64).sqrt());
            report.dictionary_ba_bound = Some(bound);
            report
                .checks
                .push(Check::at_least("dictionary_bit_accuracy", dba, bound - 0.01));
        }
    }
    Ok(report)
}

/// Rates of the ideal watermark: `Γ = r m + N(0, r σ_ε² I)` under H1 and
/// `N(0, r σ_ε² I)` under H0. Returns `(threshold, fpr, tpr, bit accuracy)`.
pub fn oracle_rates(
    r: f64,
    sigma_eps: f64,
    bits: usize,
    alpha: f64,
    trials: usize,
    rng: &mut SeededRng,
) -> Result<(f64, f64, f64, f64)> {
    let sd = sigma_eps * r.sqrt();
    let draw_null = |g: &mut SeededRng| -> Vec<f64> { (0..bits).map(|_| sd * g.standard_normal()).collect() };
    let calib: Vec<f64> = par_trials(trials, &rng.fork(11), |g| score(&draw_null(g), None).unwrap());
    let fresh: Vec<f64> = par_trials(trials, &rng.fork(12), |g| score(&draw_null(g), None).unwrap());
    let alt: Vec<(f64, f64)> = par_trials(trials, &rng.fork(13), |g| {
        let m = sample_uniform_message(bits, g).unwrap();
        let gamma: Vec<f64> = (0..bits).map(|j| r * m.bit(j) + sd * g.standard_normal()).collect();
        let acc = bit_accuracy(&decode_sign(&gamma), &m).unwrap();
        (score(&gamma, None).unwrap(), acc)
    });
    let t = calibrate_threshold(&calib, alpha)?;
    let alt_scores: Vec<f64> = alt.iter().map(|a| a.0).collect();
    let ba = alt.iter().map(|a| a.1).sum::<f64>() / trials as f64;
    Ok((t, exceed_rate(&fresh, t), exceed_rate(&alt_scores, t), ba))
}

/// Model, training and experiment settings for the theory harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryConfig {
    #[serde(default = "d_dim")]
    pub dim: usize,
    #[serde(default = "d_latent")]
    pub latent_dim: usize,
    #[serde(default = "d_sz")]
    pub sigma_z_scale: f64,
    #[serde(default = "d_se")]
    pub sigma_eps: f64,
    #[serde(default = "d_bits")]
    pub bits: usize,
    #[serde(default = "d_loss")]
    pub loss: MarginLoss,
    #[serde(default = "d_beta")]
    pub beta_theory: f64,
    #[serde(default = "d_n")]
    pub n: usize,
    #[serde(default = "d_delta")]
    pub delta: f64,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_trials")]
    pub trials: usize,
    /// Use the ideal watermark instead of training.
    #[serde(default)]
    pub oracle: bool,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_tail")]
    pub tail_average: f64,
    #[serde(default)]
    pub tolerances: GeometryTolerances,
    #[serde(default)]
    pub seed: u64,
}

fn d_dim() -> usize {
    128
}
fn d_latent() -> usize {
    8
}
fn d_sz() -> f64 {
    4.0
}
fn d_se() -> f64 {
    0.3
}
fn d_bits() -> usize {
    8
}
fn d_loss() -> MarginLoss {
    MarginLoss::Hinge
}
fn d_beta() -> f64 {
    0.05
}
fn d_n() -> usize {
    10_000
}
fn d_delta() -> f64 {
    0.05
}
fn d_alpha() -> f64 {
    0.05
}
fn d_trials() -> usize {
    10_000
}
fn d_epochs() -> usize {
    30
}
fn d_batch() -> usize {
    64
}
fn d_lr() -> f64 {
    0.05
}
fn d_tail() -> f64 {
    0.25
}

impl Default for TheoryConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl TheoryConfig {
    pub fn model(&self) -> Result<LowDimModel> {
        let mut rng = SeededRng::new(self.seed, 100);
        LowDimModel::random_orthonormal(
            self.dim,
            self.latent_dim,
            self.sigma_z_scale,
            self.sigma_eps,
            &mut rng,
        )
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut cfg = TrainConfig::with_theory_beta(self.bits, self.beta_theory, self.dim);
        cfg.loss = self.loss;
        cfg.epochs = self.epochs;
        cfg.batch_size = self.batch_size;
        cfg.learning_rate = self.learning_rate;
        cfg.tail_average = self.tail_average;
        cfg.seed = self.seed;
        cfg
    }

    /// `β > K·L`: the only minimizer is zero.
    pub fn is_degenerate(&self) -> bool {
        self.beta_theory > self.bits as f64 * self.loss.lipschitz()
    }
}

/// Trains on `n` model samples with the identity distortion.
pub fn train_on_model(cfg: &TheoryConfig, model: &LowDimModel) -> Result<WatermarkSet> {
    let mut rng = SeededRng::new(cfg.seed, 200);
    let data = model.sample_images(cfg.n, &mut rng)?;
    Ok(train(&data, &cfg.train_config())?.watermark)
}

/// Runs the geometry and detection checks for one configuration.
pub fn run_theory_check(cfg: &TheoryConfig) -> Result<(TheoryReport, WatermarkSet)> {
    let model = cfg.model()?;
    let mut report = TheoryReport::default();
    if cfg.is_degenerate() {
        let w = if cfg.oracle {
            WatermarkSet::zeros(cfg.bits, (1, 1, cfg.dim), ValueRange::Unbounded)?
        } else {
            train_on_model(cfg, &model)?
        };
        let max_norm = w.norms_sq().iter().cloned().fold(0.0, f64::max).sqrt();
        report.max_norm = Some(max_norm);
        report
            .checks
            .push(Check::at_most("trivial_minimizer_norm", max_norm, 1e-3));
        report.skipped.push(format!(
            "geometry and detection: beta {} exceeds K*L = {}, the minimizer is zero",
            cfg.beta_theory,
            cfg.bits as f64 * cfg.loss.lipschitz()
        ));
        return Ok((report, w));
    }
    let curve = PopulationCurve::new(cfg.loss, cfg.sigma_eps, cfg.beta_theory)?;
    curve.check_uniqueness_conditions()?;
    let r_star = curve.solve_r_star()?.r_star;
    let w = if cfg.oracle {
        let mut rng = SeededRng::new(cfg.seed, 300);
        oracle_watermark(&model, cfg.bits, r_star, &mut rng)?
    } else {
        train_on_model(cfg, &model)?
    };
    let tol = if cfg.oracle {
        GeometryTolerances {
            relative_leak: 1e-9,
            pairwise_cos: 1e-9,
            relative_radius: 1e-9,
        }
    } else {
        cfg.tolerances
    };
    report.merge(verify_geometry(&w, &model, &curve, cfg.n, cfg.delta, &tol)?);
    if cfg.sigma_eps > 0.0 {
        let mut rng = SeededRng::new(cfg.seed, 400);
        report.merge(verify_detection(&w, &model, cfg.alpha, cfg.trials, None, &mut rng)?);
    } else {
        report
            .skipped
            .push("detection: sigma_eps = 0 makes every statistic degenerate".into());
    }
    Ok((report, w))
}

/// Smooth random images: white noise blurred per channel, shared across
/// channels in part, scaled to mean 0.5 and std `contrast`, clipped to [0, 1].
pub fn smooth_field_images(
    n: usize,
    shape: (usize, usize, usize),
    smoothness: f64,
    contrast: f64,
    rng: &mut SeededRng,
) -> Result<Vec<ImageTensor>> {
    let (c, h, w) = shape;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::param("shape", "dimensions must be positive"));
    }
    let plane = h * w;
    let radius = ((3.0 * smoothness).ceil() as usize).max(1);
    (0..n)
        .map(|_| {
            let noise: Vec<f64> = (0..(c + 1) * plane).map(|_| rng.standard_normal()).collect();
            let field = blur(&noise, (c + 1, h, w), smoothness, radius);
            let shared = &field[c * plane..];
            let mut data: Vec<f64> = (0..c * plane)
                .map(|i| 0.7 * shared[i % plane] + 0.3 * field[i])
                .collect();
            let m = data.iter().sum::<f64>() / data.len() as f64;
            let sd = (data.iter().map(|v| (v - m).powi(2)).sum::<f64>() / data.len() as f64).sqrt();
            let s = if sd > 0.0 { contrast / sd } else { 0.0 };
            for v in data.iter_mut() {
                *v = (0.5 + s * (*v - m)).clamp(0.0, 1.0);
            }
            ImageTensor::new(c, h, w, data, ValueRange::Unit)
        })
        .collect()
}

/// Quality and robustness of a watermark on real images.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageEvaluation {
    pub mean_psnr: f64,
    /// `(distortion name, bit accuracy)` in pool order.
    pub bit_accuracy: Vec<(String, f64)>,
    pub average_bit_accuracy: f64,
    /// AUROC of `S` for clean watermarked against clean originals.
    pub auroc: f64,
}

/// Embeds a random message into every test image (clipped, as written to
/// disk), then measures PSNR, per-distortion sign-decoder bit accuracy and
/// the clean AUROC.
pub fn evaluate_images(
    w: &WatermarkSet,
    images: &[ImageTensor],
    distortions: &[Distortion],
    rng: &mut SeededRng,
) -> Result<ImageEvaluation> {
    if images.is_empty() {
        return Err(Error::Empty("test images"));
    }
    if distortions.is_empty() {
        return Err(Error::Empty("distortion list"));
    }
    let base = rng.fork(rng.stream_id().wrapping_add(17));
    let rows: Vec<Result<(f64, Vec<f64>, f64, f64, Message)>> = images
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut r = base.derive(i as u64);
            let m = sample_uniform_message(w.bits(), &mut r)?;
            let xt = embed(x, &m, w, true)?;
            let q = psnr(x, &xt, x.value_range().max_value())?;
            let mut accs = Vec::with_capacity(distortions.len());
            for d in distortions {
                let y = apply(&DistortionSpec::new(d.clone(), 1.0), &xt, &mut r)?;
                let g = inner_products_raw(y.data(), w);
                accs.push(bit_accuracy(&decode_sign(&g), &m)?);
            }
            let s0 = score(&inner_products_raw(x.data(), w), None)?;
            let s1 = score(&inner_products_raw(xt.data(), w), None)?;
            Ok((q, accs, s0, s1, m))
        })
        .collect();
    let mut psnrs = Vec::with_capacity(images.len());
    let mut sums = vec![0.0; distortions.len()];
    let mut samples = Vec::with_capacity(2 * images.len());
    for row in rows {
        let (q, accs, s0, s1, m) = row?;
        psnrs.push(q);
        for (s, a) in sums.iter_mut().zip(accs) {
            *s += a;
        }
        samples.push(ScoreSample::null(s0));
        samples.push(ScoreSample::watermarked(s1, m));
    }
    let n = images.len() as f64;
    let bit_accuracy: Vec<(String, f64)> = distortions
        .iter()
        .zip(&sums)
        .map(|(d, s)| (d.name().to_string(), s / n))
        .collect();
    let average = bit_accuracy.iter().map(|b| b.1).sum::<f64>() / distortions.len() as f64;
    let finite: Vec<f64> = psnrs.iter().cloned().filter(|p| p.is_finite()).collect();
    let mean_psnr = if finite.is_empty() {
        f64::INFINITY
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    Ok(ImageEvaluation {
        mean_psnr,
        bit_accuracy,
        average_bit_accuracy: average,
        auroc: auroc(&samples)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "parameter", content = "values", rename_all = "snake_case")]
pub enum SweepGrid {
    /// Multipliers applied to the base `beta_alg`.
    Beta(Vec<f64>),
    /// Training-set sizes (a prefix of the training images).
    N(Vec<usize>),
}

impl SweepGrid {
    fn len(&self) -> usize {
        match self {
            SweepGrid::Beta(v) => v.len(),
            SweepGrid::N(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub parameter: String,
    pub value: f64,
    pub seed: u64,
    pub psnr: f64,
    pub avg_bit_accuracy: f64,
}

/// Retrains at every grid point and seed, then evaluates PSNR and the
/// distortion-averaged bit accuracy on `test`.
pub fn sweep(
    grid: &SweepGrid,
    base: &TrainConfig,
    train_images: &[ImageTensor],
    test: &[ImageTensor],
    distortions: &[Distortion],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if grid.len() == 0 || seeds.is_empty() {
        return Err(Error::Empty("sweep grid"));
    }
    let mut rows = Vec::new();
    let points: Vec<(String, f64, TrainConfig, usize)> = match grid {
        SweepGrid::Beta(mults) => mults
            .iter()
            .map(|m| {
                let mut c = base.clone();
                c.beta_alg = base.beta_alg * m;
                ("beta".to_string(), *m, c, train_images.len())
            })
            .collect(),
        SweepGrid::N(ns) => ns
            .iter()
            .map(|n| ("n".to_string(), *n as f64, base.clone(), *n))
            .collect(),
    };
    for (name, value, cfg, n) in points {
        if n == 0 || n > train_images.len() {
            return Err(Error::param(
                "n",
                format!("grid value {n} outside 1..={}", train_images.len()),
            ));
        }
        for &seed in seeds {
            let mut c = cfg.clone();
            c.seed = seed;
            let w = train(&train_images[..n], &c)?.watermark;
            let mut rng = SeededRng::new(seed, 500);
            let ev = evaluate_images(&w, test, distortions, &mut rng)?;
            rows.push(SweepRow {
                parameter: name.clone(),
                value,
                seed,
                psnr: ev.mean_psnr,
                avg_bit_accuracy: ev.average_bit_accuracy,
            });
        }
    }
    Ok(rows)
}

/// Per grid value: `(value, median PSNR, median average bit accuracy)`.
pub fn sweep_medians(rows: &[SweepRow]) -> Vec<(f64, f64, f64)> {
    let mut values: Vec<f64> = Vec::new();
    for r in rows {
        if !values.contains(&r.value) {
            values.push(r.value);
        }
    }
    values
        .into_iter()
        .map(|v| {
            let sel: Vec<&SweepRow> = rows.iter().filter(|r| r.value == v).collect();
            let p: Vec<f64> = sel.iter().map(|r| r.psnr).collect();
            let b: Vec<f64> = sel.iter().map(|r| r.avg_bit_accuracy).collect();
            (v, median(&p), median(&b))
        })
        .collect()
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mean and standard error of per-image time, one observation per batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Timing {
    pub mean_ms: f64,
    pub std_err_ms: f64,
    pub batches: usize,
}

impl Timing {
    fn from_batches(per_image_ms: &[f64]) -> Self {
        let n = per_image_ms.len();
        let mean = per_image_ms.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = per_image_ms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self {
            mean_ms: mean,
            std_err_ms: se,
            batches: n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub batch_size: usize,
    pub images: usize,
    pub embed: Timing,
    pub decode: Timing,
}

/// Single-threaded batched embed and decode timings over full batches of
/// `images`. Decoding runs on the images embedded in the same batch.
pub fn benchmark(
    w: &WatermarkSet,
    images: &[ImageTensor],
    batch_size: usize,
    rng: &mut SeededRng,
) -> Result<BenchReport> {
    if batch_size == 0 {
        return Err(Error::param("batch_size", "must be at least 1"));
    }
    if images.len() < batch_size {
        return Err(Error::param(
            "images",
            format!("need at least {batch_size} images, got {}", images.len()),
        ));
    }
    let mut embed_ms = Vec::new();
    let mut decode_ms = Vec::new();
    for batch in images.chunks_exact(batch_size) {
        let messages = batch
            .iter()
            .map(|_| sample_uniform_message(w.bits(), rng))
            .collect::<Result<Vec<_>>>()?;
        let t = Instant::now();
        let marked = embed_batch(batch, &messages, w, false)?;
        embed_ms.push(t.elapsed().as_secs_f64() * 1e3 / batch_size as f64);
        black_box(&marked);
        let t = Instant::now();
        let decoded: Vec<Message> = inner_products_batch(&marked, w)?
            .iter()
            .map(|g| decode_sign(g))
            .collect();
        decode_ms.push(t.elapsed().as_secs_f64() * 1e3 / batch_size as f64);
        black_box(&decoded);
    }
    Ok(BenchReport {
        batch_size,
        images: embed_ms.len() * batch_size,
        embed: Timing::from_batches(&embed_ms),
        decode: Timing::from_batches(&decode_ms),
    })
}
