//! The distortion channel: parameterized image operators sampled during
//! training and applied during evaluation.
//!
//! Every operator preserves the image shape. None of them clip; noise and
//! scaling can leave the nominal value range.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, SeededRng};

/// A single distortion operator and its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distortion {
    Identity,
    /// Separable Gaussian blur, reflect padding, kernel `2·radius + 1`.
    GaussianBlur { sigma: f64, radius: usize },
    /// 8×8 block DCT, quality-scaled quantization, inverse DCT.
    JpegLike { quality: u32 },
    /// Multiplies every pixel by `factor`.
    Brightness { factor: f64 },
    /// Scales deviations from the mid-range pivot by `factor`.
    Contrast { factor: f64 },
    /// Additive white noise; `sigma` is a fraction of the range peak.
    GaussianNoise { sigma: f64 },
    /// Bilinear rotation about the center with reflect padding.
    Rotation { degrees: f64 },
    /// Keeps the central `fraction` of each side, resized back.
    CenterCrop { fraction: f64 },
    /// Zeroes `count` squares covering `fraction` of the area in total.
    RandomErase { fraction: f64, count: usize },
}

impl Distortion {
    pub fn name(&self) -> &'static str {
        match self {
            Distortion::Identity => "none",
            Distortion::GaussianBlur { .. } => "gaussian_blur",
            Distortion::JpegLike { .. } => "jpeg_like",
            Distortion::Brightness { .. } => "brightness",
            Distortion::Contrast { .. } => "contrast",
            Distortion::GaussianNoise { .. } => "gaussian_noise",
            Distortion::Rotation { .. } => "rotation",
            Distortion::CenterCrop { .. } => "center_crop",
            Distortion::RandomErase { .. } => "random_erase",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, name: &'static str, reason: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::param(name, reason.to_string()))
            }
        };
        match *self {
            Distortion::Identity => Ok(()),
            Distortion::GaussianBlur { sigma, radius } => {
                check(sigma > 0.0 && sigma.is_finite(), "sigma", "blur sigma must be positive")?;
                check((1..=64).contains(&radius), "radius", "blur radius must be in 1..=64")
            }
            Distortion::JpegLike { quality } => {
                check((1..=100).contains(&quality), "quality", "quality must be in 1..=100")
            }
            Distortion::Brightness { factor } | Distortion::Contrast { factor } => check(
                factor >= 0.0 && factor.is_finite(),
                "factor",
                "factor must be finite and nonnegative",
            ),
            Distortion::GaussianNoise { sigma } => check(
                sigma >= 0.0 && sigma.is_finite(),
                "sigma",
                "noise sigma must be nonnegative",
            ),
            Distortion::Rotation { degrees } => {
                check(degrees.is_finite(), "degrees", "angle must be finite")
            }
            Distortion::CenterCrop { fraction } => check(
                fraction > 0.0 && fraction <= 1.0,
                "fraction",
                "crop fraction must be in (0, 1]",
            ),
            Distortion::RandomErase { fraction, count } => {
                check(
                    (0.0..1.0).contains(&fraction),
                    "fraction",
                    "erase fraction must be in [0, 1)",
                )?;
                check(count >= 1, "count", "need at least one rectangle")
            }
        }
    }

    /// Default strengths for each operator kind.
    pub fn defaults() -> Vec<Distortion> {
        vec![
            Distortion::Identity,
            Distortion::GaussianBlur {
                sigma: 1.0,
                radius: 3,
            },
            Distortion::JpegLike { quality: 50 },
            Distortion::Brightness { factor: 1.3 },
            Distortion::Contrast { factor: 1.3 },
            Distortion::GaussianNoise { sigma: 0.05 },
            Distortion::Rotation { degrees: 9.0 },
            Distortion::CenterCrop { fraction: 0.7 },
            Distortion::RandomErase {
                fraction: 0.1,
                count: 1,
            },
        ]
    }
}

/// A distortion together with its sampling weight in a pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    #[serde(flatten)]
    pub distortion: Distortion,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

impl DistortionSpec {
    pub fn new(distortion: Distortion, weight: f64) -> Self {
        Self { distortion, weight }
    }

    pub fn identity() -> Self {
        Self::new(Distortion::Identity, 1.0)
    }
}

/// Identity only.
pub fn identity_pool() -> Vec<DistortionSpec> {
    vec![DistortionSpec::identity()]
}

/// All nine default settings (including none) with equal weights.
pub fn default_pool() -> Vec<DistortionSpec> {
    let all = Distortion::defaults();
    let w = 1.0 / all.len() as f64;
    all.into_iter().map(|d| DistortionSpec::new(d, w)).collect()
}

pub fn validate_pool(pool: &[DistortionSpec]) -> Result<()> {
    if pool.is_empty() {
        return Err(Error::Empty("distortion pool"));
    }
    let mut total = 0.0;
    for spec in pool {
        spec.distortion.validate()?;
        if !(spec.weight >= 0.0) || !spec.weight.is_finite() {
            return Err(Error::param("weight", "weights must be nonnegative"));
        }
        total += spec.weight;
    }
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::param(
            "weight",
            format!("pool weights sum to {total}, expected 1"),
        ));
    }
    Ok(())
}

/// Categorical draw from the pool by weight.
pub fn sample_channel<'a>(pool: &'a [DistortionSpec], rng: &mut SeededRng) -> Result<&'a DistortionSpec> {
    if pool.is_empty() {
        return Err(Error::Empty("distortion pool"));
    }
    let total: f64 = pool.iter().map(|s| s.weight).sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = None;
    for spec in pool {
        if spec.weight <= 0.0 {
            continue;
        }
        acc += spec.weight;
        last_positive = Some(spec);
        if u < acc {
            return Ok(spec);
        }
    }
    last_positive.ok_or_else(|| Error::param("weight", "all weights are zero"))
}

/// Vector-Jacobian rule used to push gradients back through a distortion.
#[derive(Debug, Clone)]
pub enum Adjoint {
    Identity,
    Scale(f64),
    /// Pixels zeroed by the forward pass (all channels).
    Erased(Vec<bool>),
    /// Blur applied again; exact away from the borders.
    Blur { sigma: f64, radius: usize },
    /// Non-differentiable or resampling operators pass gradients unchanged.
    StraightThrough,
}

impl Adjoint {
    pub fn apply(&self, grad: &[f64], shape: (usize, usize, usize)) -> Vec<f64> {
        match self {
            Adjoint::Identity | Adjoint::StraightThrough => grad.to_vec(),
            Adjoint::Scale(a) => grad.iter().map(|g| a * g).collect(),
            Adjoint::Erased(mask) => {
                let plane = shape.1 * shape.2;
                grad.iter()
                    .enumerate()
                    .map(|(i, g)| if mask[i % plane] { 0.0 } else { *g })
                    .collect()
            }
            Adjoint::Blur { sigma, radius } => blur(grad, shape, *sigma, *radius),
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Adjoint::Identity | Adjoint::StraightThrough)
    }
}

/// Applies a distortion; deterministic given the rng state.
pub fn apply(spec: &DistortionSpec, img: &ImageTensor, rng: &mut SeededRng) -> Result<ImageTensor> {
    Ok(apply_with_adjoint(&spec.distortion, img, rng)?.0)
}

pub fn apply_with_adjoint(
    distortion: &Distortion,
    img: &ImageTensor,
    rng: &mut SeededRng,
) -> Result<(ImageTensor, Adjoint)> {
    distortion.validate()?;
    let shape = img.shape();
    let range = img.value_range();
    let x = img.data();
    Ok(match *distortion {
        Distortion::Identity => (img.clone(), Adjoint::Identity),
        Distortion::GaussianBlur { sigma, radius } => (
            img.with_data(blur(x, shape, sigma, radius)),
            Adjoint::Blur { sigma, radius },
        ),
        Distortion::JpegLike { quality } => {
            let scale = match range {
                crate::tensor::ValueRange::Unit => 255.0,
                _ => 1.0,
            };
            (
                img.with_data(jpeg_like(x, shape, quality, scale)),
                Adjoint::StraightThrough,
            )
        }
        Distortion::Brightness { factor } => (
            img.with_data(x.iter().map(|v| v * factor).collect()),
            Adjoint::Scale(factor),
        ),
        Distortion::Contrast { factor } => {
            let p = range.midpoint();
            (
                img.with_data(x.iter().map(|v| p + factor * (v - p)).collect()),
                Adjoint::Scale(factor),
            )
        }
        Distortion::GaussianNoise { sigma } => {
            let s = sigma * range.max_value();
            let data = x.iter().map(|v| v + s * rng.standard_normal()).collect();
            (img.with_data(data), Adjoint::Identity)
        }
        Distortion::Rotation { degrees } => (
            img.with_data(rotate(x, shape, degrees)),
            Adjoint::StraightThrough,
        ),
        Distortion::CenterCrop { fraction } => (
            img.with_data(center_crop(x, shape, fraction)),
            Adjoint::StraightThrough,
        ),
        Distortion::RandomErase { fraction, count } => {
            let mask = erase_mask(shape, fraction, count, rng);
            let plane = shape.1 * shape.2;
            let data = x
                .iter()
                .enumerate()
                .map(|(i, v)| if mask[i % plane] { 0.0 } else { *v })
                .collect();
            (img.with_data(data), Adjoint::Erased(mask))
        }
    })
}

/// Folds a coordinate into `[0, n-1]` by mirroring about the edge samples.
fn reflect(mut i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

fn reflect_f(x: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let period = 2.0 * (n as f64 - 1.0);
    let mut y = x.rem_euclid(period);
    if y > n as f64 - 1.0 {
        y = period - y;
    }
    y
}

fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

pub(crate) fn blur(x: &[f64], (c_n, h_n, w_n): (usize, usize, usize), sigma: f64, radius: usize) -> Vec<f64> {
    let k = gaussian_kernel(sigma, radius);
    let r = radius as isize;
    let mut tmp = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for c in 0..c_n {
        let base = c * h_n * w_n;
        for h in 0..h_n {
            let row = base + h * w_n;
            for w in 0..w_n {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    acc += kv * x[row + reflect(w as isize + t as isize - r, w_n)];
                }
                tmp[row + w] = acc;
            }
        }
        for h in 0..h_n {
            for w in 0..w_n {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    acc += kv * tmp[base + reflect(h as isize + t as isize - r, h_n) * w_n + w];
                }
                out[base + h * w_n + w] = acc;
            }
        }
    }
    out
}

const LUMA_QUANT: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., 12., 12., 14., 19., 26., 58., 60., 55., 14., 13., 16.,
    24., 40., 57., 69., 56., 14., 17., 22., 29., 51., 87., 80., 62., 18., 22., 37., 56., 68., 109.,
    103., 77., 24., 35., 55., 64., 81., 104., 113., 92., 49., 64., 78., 87., 103., 121., 120., 101.,
    72., 92., 95., 98., 112., 100., 103., 99.,
];

/// IJG quality scaling of the standard luminance table.
pub fn quant_table(quality: u32) -> [f64; 64] {
    let q = quality.clamp(1, 100) as f64;
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut t = [0.0; 64];
    for (dst, base) in t.iter_mut().zip(LUMA_QUANT.iter()) {
        *dst = ((base * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    t
}

fn dct_matrix() -> [[f64; 8]; 8] {
    let mut a = [[0.0; 8]; 8];
    for (u, row) in a.iter_mut().enumerate() {
        let cu = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = cu * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos();
        }
    }
    a
}

/// `scale` maps pixel values into the 0..255 domain the table assumes.
fn jpeg_like(x: &[f64], (c_n, h_n, w_n): (usize, usize, usize), quality: u32, scale: f64) -> Vec<f64> {
    let a = dct_matrix();
    let q = quant_table(quality);
    let mut out = vec![0.0; x.len()];
    let mut block = [[0.0f64; 8]; 8];
    let mut tmp = [[0.0f64; 8]; 8];
    for c in 0..c_n {
        let base = c * h_n * w_n;
        for by in (0..h_n).step_by(8) {
            for bx in (0..w_n).step_by(8) {
                // edge-replicated padding for partial blocks
                for (i, row) in block.iter_mut().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        let h = (by + i).min(h_n - 1);
                        let w = (bx + j).min(w_n - 1);
                        *v = x[base + h * w_n + w] * scale - 128.0;
                    }
                }
                // forward: A X Aᵀ
                for u in 0..8 {
                    for j in 0..8 {
                        tmp[u][j] = (0..8).map(|i| a[u][i] * block[i][j]).sum();
                    }
                }
                for u in 0..8 {
                    for v in 0..8 {
                        let coef: f64 = (0..8).map(|j| tmp[u][j] * a[v][j]).sum();
                        let qv = q[u * 8 + v];
                        block[u][v] = (coef / qv).round() * qv;
                    }
                }
                // inverse: Aᵀ C A
                for i in 0..8 {
                    for v in 0..8 {
                        tmp[i][v] = (0..8).map(|u| a[u][i] * block[u][v]).sum();
                    }
                }
                for i in 0..8 {
                    for j in 0..8 {
                        let h = by + i;
                        let w = bx + j;
                        if h < h_n && w < w_n {
                            let v: f64 = (0..8).map(|v| tmp[i][v] * a[v][j]).sum();
                            out[base + h * w_n + w] = (v + 128.0) / scale;
                        }
                    }
                }
            }
        }
    }
    out
}

fn bilinear(plane: &[f64], h_n: usize, w_n: usize, y: f64, x: f64) -> f64 {
    let y = reflect_f(y, h_n);
    let x = reflect_f(x, w_n);
    let y0 = (y.floor() as usize).min(h_n - 1);
    let x0 = (x.floor() as usize).min(w_n - 1);
    let y1 = (y0 + 1).min(h_n - 1);
    let x1 = (x0 + 1).min(w_n - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let top = plane[y0 * w_n + x0] * (1.0 - fx) + plane[y0 * w_n + x1] * fx;
    let bot = plane[y1 * w_n + x0] * (1.0 - fx) + plane[y1 * w_n + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

fn rotate(x: &[f64], (c_n, h_n, w_n): (usize, usize, usize), degrees: f64) -> Vec<f64> {
    let theta = degrees.to_radians();
    let (s, co) = theta.sin_cos();
    let cy = (h_n as f64 - 1.0) / 2.0;
    let cx = (w_n as f64 - 1.0) / 2.0;
    let plane_len = h_n * w_n;
    let mut out = vec![0.0; x.len()];
    for c in 0..c_n {
        let plane = &x[c * plane_len..(c + 1) * plane_len];
        for h in 0..h_n {
            for w in 0..w_n {
                let dy = h as f64 - cy;
                let dx = w as f64 - cx;
                // inverse rotation gives the source location
                let sx = co * dx + s * dy + cx;
                let sy = -s * dx + co * dy + cy;
                out[c * plane_len + h * w_n + w] = bilinear(plane, h_n, w_n, sy, sx);
            }
        }
    }
    out
}

fn center_crop(x: &[f64], (c_n, h_n, w_n): (usize, usize, usize), fraction: f64) -> Vec<f64> {
    let ch = ((h_n as f64 * fraction).round() as usize).clamp(1, h_n);
    let cw = ((w_n as f64 * fraction).round() as usize).clamp(1, w_n);
    let oy = (h_n - ch) / 2;
    let ox = (w_n - cw) / 2;
    let plane_len = h_n * w_n;
    let mut out = vec![0.0; x.len()];
    for c in 0..c_n {
        let plane = &x[c * plane_len..(c + 1) * plane_len];
        for h in 0..h_n {
            let sy = ((h as f64 + 0.5) * ch as f64 / h_n as f64 - 0.5).clamp(0.0, ch as f64 - 1.0);
            for w in 0..w_n {
                let sx =
                    ((w as f64 + 0.5) * cw as f64 / w_n as f64 - 0.5).clamp(0.0, cw as f64 - 1.0);
                out[c * plane_len + h * w_n + w] =
                    bilinear(plane, h_n, w_n, oy as f64 + sy, ox as f64 + sx);
            }
        }
    }
    out
}

fn erase_mask(
    (_, h_n, w_n): (usize, usize, usize),
    fraction: f64,
    count: usize,
    rng: &mut SeededRng,
) -> Vec<bool> {
    let mut mask = vec![false; h_n * w_n];
    let area = fraction * (h_n * w_n) as f64 / count as f64;
    let side = area.sqrt();
    let eh = (side.round() as usize).clamp(0, h_n);
    let ew = ((area / eh.max(1) as f64).round() as usize).clamp(0, w_n);
    if eh == 0 || ew == 0 {
        return mask;
    }
    for _ in 0..count {
        let top = rng.random_range(0..=h_n - eh);
        let left = rng.random_range(0..=w_n - ew);
        for h in top..top + eh {
            for w in left..left + ew {
                mask[h * w_n + w] = true;
            }
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ValueRange;

    fn random_image(c: usize, h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = SeededRng::new(seed, 0);
        let data = (0..c * h * w).map(|_| rng.random::<f64>()).collect();
        ImageTensor::new(c, h, w, data, ValueRange::Unit).unwrap()
    }

    fn run(d: Distortion, img: &ImageTensor) -> ImageTensor {
        apply(&DistortionSpec::new(d, 1.0), img, &mut SeededRng::new(1, 0)).unwrap()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn identity_is_exact() {
        let img = random_image(3, 9, 11, 1);
        assert_eq!(run(Distortion::Identity, &img), img);
    }

    #[test]
    fn neutral_scalings() {
        let img = random_image(3, 8, 8, 2);
        let b = run(Distortion::Brightness { factor: 1.0 }, &img);
        let c = run(Distortion::Contrast { factor: 1.0 }, &img);
        assert!(max_abs_diff(b.data(), img.data()) < 1e-9);
        assert!(max_abs_diff(c.data(), img.data()) < 1e-9);
    }

    #[test]
    fn noise_std_matches() {
        let img = ImageTensor::new(1, 256, 256, vec![0.5; 65536], ValueRange::Unit).unwrap();
        let out = run(Distortion::GaussianNoise { sigma: 0.05 }, &img);
        let diffs: Vec<f64> = out.data().iter().zip(img.data()).map(|(a, b)| a - b).collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / diffs.len() as f64;
        assert!((var.sqrt() / 0.05 - 1.0).abs() < 0.03);
    }

    #[test]
    fn shapes_preserved() {
        let img = random_image(3, 13, 10, 3);
        for d in Distortion::defaults() {
            let out = run(d.clone(), &img);
            assert_eq!(out.shape(), img.shape(), "{}", d.name());
        }
    }

    #[test]
    fn small_blur_is_identity() {
        let img = random_image(2, 12, 12, 4);
        let out = run(Distortion::GaussianBlur { sigma: 0.05, radius: 3 }, &img);
        assert!(max_abs_diff(out.data(), img.data()) <= 1e-3);
    }

    #[test]
    fn blur_preserves_constants() {
        let img = ImageTensor::new(1, 7, 9, vec![0.3; 63], ValueRange::Unit).unwrap();
        let out = run(Distortion::GaussianBlur { sigma: 2.0, radius: 5 }, &img);
        assert!(max_abs_diff(out.data(), img.data()) < 1e-12);
    }

    #[test]
    fn linear_kinds_commute_with_scaling() {
        let img = random_image(3, 10, 10, 5);
        let a = 0.7;
        let scaled = img.with_data(img.data().iter().map(|v| a * v).collect());
        let cases = [
            (Distortion::Identity, 0.0),
            (Distortion::GaussianBlur { sigma: 1.0, radius: 3 }, 0.0),
            (Distortion::Brightness { factor: 1.3 }, 0.0),
            // constant term p(1 - f) picks up a factor (1 - a)
            (Distortion::Contrast { factor: 1.3 }, (1.0 - a) * 0.5 * (1.0 - 1.3)),
        ];
        for (d, offset) in cases {
            let lhs = run(d.clone(), &scaled);
            let rhs = run(d.clone(), &img);
            for (l, r) in lhs.data().iter().zip(rhs.data()) {
                assert!((l - (a * r + offset)).abs() < 1e-12, "{}", d.name());
            }
        }
    }

    #[test]
    fn jpeg_quality_ordering() {
        let img = random_image(1, 16, 16, 6);
        let lo = run(Distortion::JpegLike { quality: 10 }, &img);
        let hi = run(Distortion::JpegLike { quality: 95 }, &img);
        let err = |o: &ImageTensor| max_abs_diff(o.data(), img.data());
        assert!(err(&hi) < err(&lo));
        // a flat block survives quantization exactly
        let flat = ImageTensor::new(1, 8, 8, vec![128.0 / 255.0; 64], ValueRange::Unit).unwrap();
        let out = run(Distortion::JpegLike { quality: 50 }, &flat);
        assert!(max_abs_diff(out.data(), flat.data()) < 1e-12);
    }

    #[test]
    fn quant_table_anchors() {
        assert_eq!(quant_table(50), LUMA_QUANT);
        assert!(quant_table(100).iter().all(|v| *v == 1.0));
        assert_eq!(quant_table(10)[0], 80.0);
    }

    #[test]
    fn rotation_zero_and_full_turn() {
        let img = random_image(2, 9, 9, 7);
        assert!(max_abs_diff(run(Distortion::Rotation { degrees: 0.0 }, &img).data(), img.data()) < 1e-12);
        assert!(max_abs_diff(run(Distortion::Rotation { degrees: 360.0 }, &img).data(), img.data()) < 1e-9);
        // 90 degrees on a square maps pixels exactly
        let r = run(Distortion::Rotation { degrees: 90.0 }, &img);
        let back = run(Distortion::Rotation { degrees: -90.0 }, &r);
        assert!(max_abs_diff(back.data(), img.data()) < 1e-9);
    }

    #[test]
    fn full_crop_is_identity() {
        let img = random_image(1, 10, 12, 8);
        let out = run(Distortion::CenterCrop { fraction: 1.0 }, &img);
        assert!(max_abs_diff(out.data(), img.data()) < 1e-12);
    }

    #[test]
    fn erase_covers_fraction() {
        let img = ImageTensor::new(3, 20, 20, vec![1.0; 1200], ValueRange::Unit).unwrap();
        let out = run(Distortion::RandomErase { fraction: 0.1, count: 1 }, &img);
        let zeros = out.data().iter().filter(|v| **v == 0.0).count() as f64;
        assert!((zeros / 1200.0 - 0.1).abs() <= 0.01);
    }

    #[test]
    fn invalid_params_rejected() {
        let img = random_image(1, 4, 4, 9);
        let bad = [
            Distortion::GaussianBlur { sigma: 0.0, radius: 3 },
            Distortion::JpegLike { quality: 0 },
            Distortion::CenterCrop { fraction: 1.5 },
            Distortion::RandomErase { fraction: 1.0, count: 1 },
            Distortion::GaussianNoise { sigma: -1.0 },
        ];
        for d in bad {
            assert!(apply(&DistortionSpec::new(d, 1.0), &img, &mut SeededRng::new(0, 0)).is_err());
        }
    }

    #[test]
    fn channel_sampling() {
        let mut rng = SeededRng::new(10, 0);
        let single = vec![DistortionSpec::new(Distortion::Brightness { factor: 1.1 }, 1.0)];
        for _ in 0..50 {
            assert_eq!(sample_channel(&single, &mut rng).unwrap(), &single[0]);
        }
        let pool = vec![
            DistortionSpec::new(Distortion::Identity, 0.5),
            DistortionSpec::new(Distortion::Brightness { factor: 1.3 }, 0.5),
            DistortionSpec::new(Distortion::Contrast { factor: 1.3 }, 0.0),
        ];
        validate_pool(&pool).unwrap();
        let mut counts = [0usize; 3];
        for _ in 0..10_000 {
            let s = sample_channel(&pool, &mut rng).unwrap();
            let idx = pool.iter().position(|p| p == s).unwrap();
            counts[idx] += 1;
        }
        assert_eq!(counts[2], 0);
        assert!((counts[0] as f64 / 1e4 - 0.5).abs() <= 0.02);
        assert!(sample_channel(&[], &mut rng).is_err());
        assert!(validate_pool(&[DistortionSpec::new(Distortion::Identity, 0.4)]).is_err());
    }

    #[test]
    fn pool_json_shape() {
        let text = serde_json::to_string(&default_pool()).unwrap();
        let back: Vec<DistortionSpec> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, default_pool());
        let parsed: DistortionSpec =
            serde_json::from_str(r#"{"kind":"gaussian_noise","sigma":0.02}"#).unwrap();
        assert_eq!(parsed.weight, 1.0);
    }

    #[test]
    fn erased_adjoint_masks_gradient() {
        let img = random_image(2, 6, 6, 11);
        let (out, adj) = apply_with_adjoint(
            &Distortion::RandomErase { fraction: 0.25, count: 1 },
            &img,
            &mut SeededRng::new(3, 0),
        )
        .unwrap();
        let g = adj.apply(&vec![1.0; 72], img.shape());
        for (o, gv) in out.data().iter().zip(&g) {
            if *gv == 0.0 {
                assert_eq!(*o, 0.0);
            }
        }
    }
}
