//! Embedding, inner products, detection statistics, decoders and threshold
//! calibration.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowdim::LowDimModel;
use crate::tensor::{dot, fmt_shape, ImageTensor, Message, SeededRng, ValueRange};
use crate::trainer::WatermarkSet;

fn check_shape(x: &ImageTensor, w: &WatermarkSet) -> Result<()> {
    if x.shape() != w.shape() {
        return Err(Error::ShapeMismatch {
            expected: fmt_shape(w.shape()),
            actual: fmt_shape(x.shape()),
        });
    }
    Ok(())
}

/// `x̃ = x + Σ_k m_k w_k`, optionally clamped to the image's value range.
pub fn embed(x: &ImageTensor, m: &Message, w: &WatermarkSet, clip: bool) -> Result<ImageTensor> {
    check_shape(x, w)?;
    if m.len() != w.bits() {
        return Err(Error::BitCountMismatch {
            expected: w.bits(),
            actual: m.len(),
        });
    }
    let mut data = x.data().to_vec();
    for (k, wk) in w.vectors().iter().enumerate() {
        let mk = m.bit(k);
        for (a, b) in data.iter_mut().zip(wk) {
            *a += mk * b;
        }
    }
    let out = x.with_data(data);
    Ok(if clip { out.clamped() } else { out })
}

/// `Γ_k = ⟨w_k, x⟩`.
pub fn inner_products(x: &ImageTensor, w: &WatermarkSet) -> Result<Vec<f64>> {
    check_shape(x, w)?;
    Ok(inner_products_raw(x.data(), w))
}

pub fn inner_products_raw(x: &[f64], w: &WatermarkSet) -> Vec<f64> {
    w.vectors().iter().map(|wk| dot(wk, x)).collect()
}

/// Pixels per block in the batched routines: one block of every watermark
/// vector stays in cache while the whole batch passes over it.
const BLOCK: usize = 2048;

/// [`embed`] for a batch. The watermark is read once per batch instead of
/// once per image; results are bit-identical to the per-image version.
pub fn embed_batch(
    xs: &[ImageTensor],
    messages: &[Message],
    w: &WatermarkSet,
    clip: bool,
) -> Result<Vec<ImageTensor>> {
    if xs.len() != messages.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.len(),
            actual: messages.len(),
        });
    }
    for (x, m) in xs.iter().zip(messages) {
        check_shape(x, w)?;
        if m.len() != w.bits() {
            return Err(Error::BitCountMismatch {
                expected: w.bits(),
                actual: m.len(),
            });
        }
    }
    let mut out: Vec<Vec<f64>> = xs.iter().map(|x| x.data().to_vec()).collect();
    for start in (0..w.dim()).step_by(BLOCK) {
        let end = (start + BLOCK).min(w.dim());
        for (data, m) in out.iter_mut().zip(messages) {
            let block = &mut data[start..end];
            for (k, wk) in w.vectors().iter().enumerate() {
                let mk = m.bit(k);
                for (a, b) in block.iter_mut().zip(&wk[start..end]) {
                    *a += mk * b;
                }
            }
        }
    }
    Ok(xs
        .iter()
        .zip(out)
        .map(|(x, data)| {
            let y = x.with_data(data);
            if clip {
                y.clamped()
            } else {
                y
            }
        })
        .collect())
}

/// [`inner_products`] for a batch, reading the watermark once per batch.
/// Blocked summation may differ from the per-image result in the last bits.
pub fn inner_products_batch(xs: &[ImageTensor], w: &WatermarkSet) -> Result<Vec<Vec<f64>>> {
    for x in xs {
        check_shape(x, w)?;
    }
    let k = w.bits();
    let mut gammas = vec![vec![0.0; k]; xs.len()];
    for start in (0..w.dim()).step_by(BLOCK) {
        let end = (start + BLOCK).min(w.dim());
        for (x, g) in xs.iter().zip(gammas.iter_mut()) {
            let block = &x.data()[start..end];
            let mut j = 0;
            while j + 4 <= k {
                let vs = std::array::from_fn(|v| &w.vector(j + v)[start..end]);
                for (gv, d) in g[j..j + 4].iter_mut().zip(dot4(vs, block)) {
                    *gv += d;
                }
                j += 4;
            }
            for (gk, wk) in g[j..].iter_mut().zip(&w.vectors()[j..]) {
                *gk += dot(&wk[start..end], block);
            }
        }
    }
    Ok(gammas)
}

/// Four dot products against the same `x`, sharing each load of `x`.
fn dot4(ws: [&[f64]; 4], x: &[f64]) -> [f64; 4] {
    let mut acc = [[0.0f64; 4]; 4];
    let n = x.len() / 4 * 4;
    for j in (0..n).step_by(4) {
        let xv: [f64; 4] = x[j..j + 4].try_into().expect("four lanes");
        for (a, wv) in acc.iter_mut().zip(&ws) {
            let wv: [f64; 4] = wv[j..j + 4].try_into().expect("four lanes");
            for l in 0..4 {
                a[l] += wv[l] * xv[l];
            }
        }
    }
    std::array::from_fn(|v| {
        let a = acc[v];
        let tail: f64 = (n..x.len()).map(|j| ws[v][j] * x[j]).sum();
        (a[0] + a[1]) + (a[2] + a[3]) + tail
    })
}

/// `S = Σ_k |Γ_k|`.
pub fn statistic_s(gamma: &[f64]) -> f64 {
    gamma.iter().map(|g| g.abs()).sum()
}

/// `max_{m ∈ D} ⟨m, Γ⟩` and its maximizer; ties go to the smallest message.
pub fn statistic_s_dict(gamma: &[f64], dict: &Dictionary) -> Result<(f64, Message)> {
    if gamma.len() != dict.bits() {
        return Err(Error::BitCountMismatch {
            expected: dict.bits(),
            actual: gamma.len(),
        });
    }
    // messages are stored sorted, so strict improvement keeps the smallest
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    for (i, m) in dict.messages().iter().enumerate() {
        let v = m.dot(gamma);
        if v > best {
            best = v;
            arg = i;
        }
    }
    Ok((best, dict.messages()[arg].clone()))
}

/// Per-bit sign with `sign(0) = +1`.
pub fn decode_sign(gamma: &[f64]) -> Message {
    Message::new(gamma.iter().map(|g| if *g >= 0.0 { 1 } else { -1 }).collect())
        .expect("nonempty gamma")
}

pub fn decode_dict(gamma: &[f64], dict: &Dictionary) -> Result<Message> {
    Ok(statistic_s_dict(gamma, dict)?.1)
}

/// Empirical `(1-α)`-quantile: the smallest score whose empirical CDF is at
/// least `1-α`.
pub fn calibrate_threshold(scores: &[f64], alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::param("alpha", "must lie in (0, 1]"));
    }
    let need = (2.0 / alpha).ceil() as usize;
    if scores.len() < need {
        return Err(Error::TooFewScores {
            got: scores.len(),
            need,
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidValue("NaN calibration score".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = (((1.0 - alpha) * n as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(sorted[rank.min(n) - 1])
}

/// `ln` of the largest dictionary size for which the dictionary decoder's
/// error bound beats the sign decoder.
pub fn log_dictionary_size_bound(mu: f64, sigma: f64, d_min: usize) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::param("sigma", "must be positive"));
    }
    if d_min == 0 {
        return Err(Error::param("d_min", "must be at least 1"));
    }
    let mu2 = mu * mu;
    let d = d_min as f64;
    Ok(mu2.ln() + 0.5 * d.ln() - (mu2 + sigma * sigma).ln()
        + mu2 * (d - 1.0) / (2.0 * sigma * sigma))
}

/// `|D| ≤ (μ²√d_min / (μ²+σ²)) · exp(μ²(d_min−1) / 2σ²)`.
pub fn dictionary_improvement_condition(
    mu: f64,
    sigma: f64,
    d_min: usize,
    dict_size: usize,
) -> Result<bool> {
    Ok((dict_size as f64).ln() <= log_dictionary_size_bound(mu, sigma, d_min)?)
}

/// A set of admissible messages, kept sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    messages: Vec<Message>,
    d_min: usize,
}

impl Dictionary {
    pub fn new(mut messages: Vec<Message>) -> Result<Self> {
        let k = messages.first().ok_or(Error::Empty("dictionary"))?.len();
        if let Some(m) = messages.iter().find(|m| m.len() != k) {
            return Err(Error::BitCountMismatch {
                expected: k,
                actual: m.len(),
            });
        }
        messages.sort();
        if let Some(pair) = messages.windows(2).find(|p| p[0] == p[1]) {
            return Err(Error::InvalidValue(format!(
                "duplicate dictionary message {}",
                pair[0]
            )));
        }
        let d_min = crate::eval::d_min(&messages);
        Ok(Self { messages, d_min })
    }

    /// Every message of length `bits`.
    pub fn complete(bits: usize) -> Result<Self> {
        if bits == 0 || bits > 20 {
            return Err(Error::param("bits", "complete dictionaries need 1..=20 bits"));
        }
        let msgs = (0..1usize << bits)
            .map(|code| {
                Message::new(
                    (0..bits)
                        .map(|j| if code >> (bits - 1 - j) & 1 == 1 { 1 } else { -1 })
                        .collect(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(msgs)
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn bits(&self) -> usize {
        self.messages[0].len()
    }

    /// Minimum pairwise Hamming distance; `K + 1` for a single message.
    pub fn d_min(&self) -> usize {
        self.d_min
    }

    pub fn contains(&self, m: &Message) -> bool {
        self.messages.binary_search(m).is_ok()
    }

    /// One message per line, `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let msgs = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty())
            .map(Message::parse)
            .collect::<Result<Vec<_>>>()?;
        Self::new(msgs)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# {} messages, d_min = {}\n", self.len(), self.d_min);
        for m in &self.messages {
            s.push_str(&m.to_plus_minus());
            s.push('\n');
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionMode {
    NoDictionary,
    Dictionary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub gamma: Vec<f64>,
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "S_dict")]
    pub s_dict: Option<f64>,
    pub decision: bool,
    pub decoded: Message,
    pub threshold_used: f64,
    pub mode: DetectionMode,
}

/// Detects with `S` (or `S_D` when a dictionary is given) against
/// `threshold` and decodes with the matching rule.
pub fn detect(gamma: &[f64], dict: Option<&Dictionary>, threshold: f64) -> Result<DetectionReport> {
    if gamma.is_empty() {
        return Err(Error::Empty("inner products"));
    }
    let s = statistic_s(gamma);
    Ok(match dict {
        None => DetectionReport {
            gamma: gamma.to_vec(),
            s,
            s_dict: None,
            decision: s > threshold,
            decoded: decode_sign(gamma),
            threshold_used: threshold,
            mode: DetectionMode::NoDictionary,
        },
        Some(d) => {
            let (sd, m) = statistic_s_dict(gamma, d)?;
            DetectionReport {
                gamma: gamma.to_vec(),
                s,
                s_dict: Some(sd),
                decision: sd > threshold,
                decoded: m,
                threshold_used: threshold,
                mode: DetectionMode::Dictionary,
            }
        }
    })
}

/// Detection score used for calibration: `S`, or `S_D` with a dictionary.
pub fn score(gamma: &[f64], dict: Option<&Dictionary>) -> Result<f64> {
    match dict {
        None => Ok(statistic_s(gamma)),
        Some(d) => Ok(statistic_s_dict(gamma, d)?.0),
    }
}

/// `K` mutually orthogonal vectors of squared norm `r`, orthogonal to the
/// model's image subspace.
pub fn oracle_watermark(
    model: &LowDimModel,
    bits: usize,
    r: f64,
    rng: &mut SeededRng,
) -> Result<WatermarkSet> {
    if !model.supports_bits(bits) {
        return Err(Error::param(
            "bits",
            format!(
                "need d + K < D (d={}, K={bits}, D={})",
                model.latent_dim(),
                model.dim()
            ),
        ));
    }
    if !(r >= 0.0) || !r.is_finite() {
        return Err(Error::param("r", "must be finite and nonnegative"));
    }
    let dim = model.dim();
    let q = model.orthonormal_basis();
    let g = DMatrix::from_fn(dim, bits, |_, _| rng.standard_normal());
    let complement = |m: &DMatrix<f64>| m - q * q.tr_mul(m);
    let qr = complement(&g).qr().q();
    // a second pass removes the rounding residue left in U
    let basis = complement(&qr).qr().q();
    let scale = r.sqrt();
    let vectors = (0..bits)
        .map(|k| basis.column(k).iter().map(|v| v * scale).collect())
        .collect();
    WatermarkSet::new(vectors, (1, 1, dim), ValueRange::Unbounded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{norm_sq, sample_uniform_message};
    use rand::Rng;

    fn msg(s: &str) -> Message {
        Message::parse(s).unwrap()
    }

    fn random_set(k: usize, shape: (usize, usize, usize), seed: u64) -> WatermarkSet {
        let mut rng = SeededRng::new(seed, 0);
        let d = shape.0 * shape.1 * shape.2;
        WatermarkSet::new(
            (0..k)
                .map(|_| (0..d).map(|_| 0.1 * rng.standard_normal()).collect())
                .collect(),
            shape,
            ValueRange::Unit,
        )
        .unwrap()
    }

    fn random_image(shape: (usize, usize, usize), seed: u64) -> ImageTensor {
        let mut rng = SeededRng::new(seed, 1);
        let d = shape.0 * shape.1 * shape.2;
        ImageTensor::new(
            shape.0,
            shape.1,
            shape.2,
            (0..d).map(|_| rng.random::<f64>()).collect(),
            ValueRange::Unit,
        )
        .unwrap()
    }

    #[test]
    fn zero_watermark_is_identity() {
        let x = random_image((3, 4, 4), 1);
        let w = WatermarkSet::zeros(5, (3, 4, 4), ValueRange::Unit).unwrap();
        assert_eq!(embed(&x, &msg("+-+-+"), &w, false).unwrap(), x);
    }

    #[test]
    fn embed_inverse_and_errors() {
        let x = random_image((3, 4, 4), 2);
        let w = random_set(4, (3, 4, 4), 3);
        let m = msg("+--+");
        let back = embed(&embed(&x, &m, &w, false).unwrap(), &m.negated(), &w, false).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(
            embed(&x, &msg("+-"), &w, false),
            Err(Error::BitCountMismatch { .. })
        ));
        assert!(embed(&random_image((3, 4, 5), 2), &m, &w, false).is_err());
        let clipped = embed(&x, &m, &w, true).unwrap();
        assert!(clipped.is_within_range());
    }

    #[test]
    fn orthogonal_watermark_energy() {
        let mut rng = SeededRng::new(4, 0);
        let model = LowDimModel::random_orthonormal(40, 4, 1.0, 0.3, &mut rng).unwrap();
        let w = oracle_watermark(&model, 6, 2.5, &mut rng).unwrap();
        let x = ImageTensor::zeros(1, 1, 40, ValueRange::Unbounded);
        for _ in 0..5 {
            let m = sample_uniform_message(6, &mut rng).unwrap();
            let xt = embed(&x, &m, &w, false).unwrap();
            assert!((norm_sq(xt.data()) - 6.0 * 2.5).abs() < 1e-9);
        }
    }

    #[test]
    fn oracle_watermark_construction() {
        let mut rng = SeededRng::new(5, 0);
        let model = LowDimModel::harness_default(&mut rng);
        let w = oracle_watermark(&model, 8, 1.5, &mut rng).unwrap();
        for j in 0..8 {
            assert!((norm_sq(w.vector(j)) - 1.5).abs() < 1e-9);
            let leak = norm_sq(&model.project_onto_u(w.vector(j)).unwrap()).sqrt();
            assert!(leak < 1e-9);
            for k in 0..j {
                assert!(dot(w.vector(j), w.vector(k)).abs() < 1e-9);
            }
        }
        assert!(oracle_watermark(&model, 120, 1.0, &mut rng).is_err());
    }

    #[test]
    fn gamma_examples() {
        let w = WatermarkSet::from_vectors(vec![
            vec![2.0, 0.0, 0.0],
            vec![0.0, 2.0, 0.0],
        ])
        .unwrap();
        let x = w.as_image(0);
        assert_eq!(inner_products(&x, &w).unwrap(), vec![4.0, 0.0]);
        let a = random_image((1, 1, 3), 6).converted(ValueRange::Unbounded);
        let b = random_image((1, 1, 3), 7).converted(ValueRange::Unbounded);
        let sum = a.with_data(a.data().iter().zip(b.data()).map(|(p, q)| p + q).collect());
        let ga = inner_products(&a, &w).unwrap();
        let gb = inner_products(&b, &w).unwrap();
        for (k, g) in inner_products(&sum, &w).unwrap().iter().enumerate() {
            assert!((g - ga[k] - gb[k]).abs() <= 1e-9 * g.abs().max(1.0));
        }
    }

    #[test]
    fn statistics_examples() {
        assert_eq!(statistic_s(&[1.0, -2.0, 3.0]), 6.0);
        let single = Dictionary::new(vec![msg("+-+")]).unwrap();
        let g = [0.5, 0.25, -1.0];
        assert_eq!(statistic_s_dict(&g, &single).unwrap().0, 0.5 - 0.25 - 1.0);
        assert_eq!(single.d_min(), 4);
    }

    #[test]
    fn complete_dictionary_matches_s() {
        let mut rng = SeededRng::new(8, 0);
        for k in 1..=10 {
            let d = Dictionary::complete(k).unwrap();
            assert_eq!(d.len(), 1 << k);
            for _ in 0..5 {
                let g: Vec<f64> = (0..k).map(|_| rng.standard_normal()).collect();
                let (sd, m) = statistic_s_dict(&g, &d).unwrap();
                assert!((sd - statistic_s(&g)).abs() < 1e-12);
                assert_eq!(m, decode_sign(&g));
            }
        }
    }

    #[test]
    fn sign_decoder_examples() {
        assert_eq!(decode_sign(&[0.1, -0.2]), msg("+-"));
        assert_eq!(decode_sign(&[0.0]), msg("+"));
    }

    #[test]
    fn dict_decoder_examples() {
        let d = Dictionary::new(vec![msg("++-+"), msg("+---"), msg("-+++")]).unwrap();
        let truth = msg("+---");
        let g: Vec<f64> = truth.bits().iter().map(|b| 1.7 * f64::from(*b)).collect();
        assert_eq!(decode_dict(&g, &d).unwrap(), truth);

        // two messages differing in bit 2: decision is the sign of Γ_2
        let pair = Dictionary::new(vec![msg("+-+"), msg("+--")]).unwrap();
        let mut rng = SeededRng::new(9, 0);
        for _ in 0..200 {
            let g: Vec<f64> = (0..3).map(|_| rng.standard_normal()).collect();
            let expect = if g[2] > 0.0 { msg("+-+") } else { msg("+--") };
            assert_eq!(decode_dict(&g, &pair).unwrap(), expect);
        }
        // exact tie picks the lexicographically smallest
        assert_eq!(decode_dict(&[1.0, 0.0, 0.0], &pair).unwrap(), msg("+--"));
    }

    #[test]
    fn calibration_examples() {
        let scores: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(calibrate_threshold(&scores, 0.05).unwrap(), 95.0);
        assert_eq!(calibrate_threshold(&scores, 1.0).unwrap(), 1.0);
        assert_eq!(calibrate_threshold(&scores, 0.02).unwrap(), 98.0);
        // smaller alpha climbs toward the maximum
        let many: Vec<f64> = (1..=10_000).map(f64::from).collect();
        let mut prev = 0.0;
        for alpha in [0.5, 0.1, 0.01, 0.001, 0.0002] {
            let t = calibrate_threshold(&many, alpha).unwrap();
            assert!(t >= prev);
            prev = t;
        }
        assert_eq!(prev, 9998.0);
        match calibrate_threshold(&scores[..30], 0.05) {
            Err(Error::TooFewScores { got: 30, need: 40 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn improvement_condition_examples() {
        let log_bound = log_dictionary_size_bound(1.0, 0.5, 3).unwrap();
        let bound = log_bound.exp();
        let oracle = 3f64.sqrt() / 1.25 * 4f64.exp();
        assert!((bound - oracle).abs() < 1e-9 * oracle);
        assert!((bound - 75.66).abs() < 0.01);
        assert!(dictionary_improvement_condition(1.0, 0.5, 3, 75).unwrap());
        assert!(!dictionary_improvement_condition(1.0, 0.5, 3, 76).unwrap());
        for size in 2..50 {
            assert!(!dictionary_improvement_condition(1.0, 0.5, 1, size).unwrap());
        }
        let mut prev = f64::NEG_INFINITY;
        for d in 1..30 {
            let b = log_dictionary_size_bound(0.8, 0.6, d).unwrap();
            assert!(b >= prev);
            prev = b;
        }
        // far beyond f64 range still answers
        assert!(dictionary_improvement_condition(10.0, 0.1, 500, usize::MAX).unwrap());
    }

    #[test]
    fn dictionary_file_format() {
        let d = Dictionary::parse("# header\n++--\n1010  # trailing\n\n0000\n").unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.d_min(), 2);
        assert!(d.contains(&msg("+-+-")));
        assert_eq!(Dictionary::parse(&d.to_text()).unwrap(), d);
        assert!(Dictionary::parse("++\n+-+\n").is_err());
        assert!(Dictionary::parse("++\n++\n").is_err());
        assert!(Dictionary::parse("# nothing\n").is_err());
        assert!(Dictionary::parse("+x\n").is_err());
    }

    #[test]
    fn report_json() {
        let d = Dictionary::new(vec![msg("++"), msg("--")]).unwrap();
        let r = detect(&[0.5, -2.0], Some(&d), 0.1).unwrap();
        assert_eq!(r.decoded, msg("--"));
        assert!(r.decision);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"decoded\":\"--\""));
        let back: DetectionReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        let r = detect(&[0.5, -2.0], None, 3.0).unwrap();
        assert!(!r.decision);
        assert_eq!(r.s, 2.5);
    }

    #[test]
    fn noiseless_model_decodes_exactly() {
        let mut rng = SeededRng::new(10, 0);
        let model = LowDimModel::random_orthonormal(32, 3, 4.0, 0.0, &mut rng).unwrap();
        let w = oracle_watermark(&model, 5, 1.2, &mut rng).unwrap();
        for s in model.sample(50, &mut rng).unwrap() {
            let null = inner_products_raw(&s.x, &w);
            assert!(null.iter().all(|g| g.abs() < 1e-9));
            let m = sample_uniform_message(5, &mut rng).unwrap();
            let x = ImageTensor::new(1, 1, 32, s.x.clone(), ValueRange::Unbounded).unwrap();
            let g = inner_products(&embed(&x, &m, &w, false).unwrap(), &w).unwrap();
            for (k, gk) in g.iter().enumerate() {
                assert!((gk - 1.2 * m.bit(k)).abs() < 1e-9);
            }
            assert_eq!(decode_sign(&g), m);
        }
    }

    #[test]
    fn batched_routines_match_per_image() {
        // 3x40x40 = 4800 pixels spans several blocks, the last one partial.
        let shape = (3, 40, 40);
        let w = random_set(5, shape, 31);
        let xs: Vec<ImageTensor> = (0..7).map(|i| random_image(shape, 40 + i)).collect();
        let mut rng = SeededRng::new(32, 0);
        let ms: Vec<Message> = (0..7).map(|_| sample_uniform_message(5, &mut rng).unwrap()).collect();
        for clip in [false, true] {
            let batch = embed_batch(&xs, &ms, &w, clip).unwrap();
            for ((x, m), y) in xs.iter().zip(&ms).zip(&batch) {
                assert_eq!(&embed(x, m, &w, clip).unwrap(), y);
            }
        }
        let gammas = inner_products_batch(&xs, &w).unwrap();
        for (x, g) in xs.iter().zip(&gammas) {
            for (a, b) in inner_products(x, &w).unwrap().iter().zip(g) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
            }
        }
        assert!(embed_batch(&xs, &ms[..6], &w, false).is_err());
        let wrong = random_image((3, 8, 8), 1);
        assert!(inner_products_batch(&[wrong], &w).is_err());
    }
}
