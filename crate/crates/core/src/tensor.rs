//! Image containers, messages, seeded random streams and PSNR.
//!
//! Images are `C×H×W` arrays of `f64` laid out row-major in `(c, h, w)`
//! order. That layout is the one and only embedding of an image into
//! `R^D` used anywhere in the crate.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Declared pixel value range of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueRange {
    /// `[0, 1]`
    Unit,
    /// `[0, 255]`
    Byte,
    Unbounded,
}

impl ValueRange {
    pub fn bounds(self) -> Option<(f64, f64)> {
        match self {
            ValueRange::Unit => Some((0.0, 1.0)),
            ValueRange::Byte => Some((0.0, 255.0)),
            ValueRange::Unbounded => None,
        }
    }

    /// Peak value used for PSNR. Unbounded tensors fall back to 1.
    pub fn max_value(self) -> f64 {
        match self {
            ValueRange::Byte => 255.0,
            _ => 1.0,
        }
    }

    /// Mid-point of the range, used as the contrast pivot.
    pub fn midpoint(self) -> f64 {
        match self.bounds() {
            Some((lo, hi)) => 0.5 * (lo + hi),
            None => 0.0,
        }
    }

    pub fn to_code(self) -> u8 {
        match self {
            ValueRange::Unit => 0,
            ValueRange::Byte => 1,
            ValueRange::Unbounded => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(ValueRange::Unit),
            1 => Ok(ValueRange::Byte),
            2 => Ok(ValueRange::Unbounded),
            other => Err(Error::Format {
                what: "value range",
                reason: format!("unknown range code {other}"),
            }),
        }
    }
}

/// A `C×H×W` image with a nominal value range.
///
/// Construction through [`ImageTensor::new`] checks that every element lies
/// in the declared range. Arithmetic that deliberately leaves the range
/// (unclipped embedding, additive noise) keeps the nominal label; call
/// [`ImageTensor::clamped`] before treating the result as displayable.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
    value_range: ValueRange,
}

impl ImageTensor {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
        value_range: ValueRange,
    ) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidValue(format!(
                "image dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: data.len(),
            });
        }
        if let Some((lo, hi)) = value_range.bounds() {
            if let Some(bad) = data.iter().find(|v| !(lo..=hi).contains(*v)) {
                return Err(Error::InvalidValue(format!(
                    "pixel value {bad} outside declared range [{lo}, {hi}]"
                )));
            }
        } else if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("non-finite pixel value".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
            value_range,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize, value_range: ValueRange) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
            value_range,
        }
    }

    /// Builds a tensor without the range check; shape is still enforced.
    pub(crate) fn from_raw(
        (channels, height, width): (usize, usize, usize),
        data: Vec<f64>,
        value_range: ValueRange,
    ) -> Self {
        assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
            value_range,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Ambient dimension `D = C·H·W`.
    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn value_range(&self) -> ValueRange {
        self.value_range
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, h: usize, w: usize) -> usize {
        (c * self.height + h) * self.width + w
    }

    #[inline]
    pub fn get(&self, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(c, h, w)]
    }

    pub fn is_within_range(&self) -> bool {
        match self.value_range.bounds() {
            Some((lo, hi)) => self.data.iter().all(|v| (lo..=hi).contains(v)),
            None => true,
        }
    }

    /// Clamps every element into the declared range.
    pub fn clamped(mut self) -> Self {
        if let Some((lo, hi)) = self.value_range.bounds() {
            for v in &mut self.data {
                *v = v.clamp(lo, hi);
            }
        }
        self
    }

    /// Re-expresses the image in another range (affine rescale between unit and byte).
    pub fn converted(&self, target: ValueRange) -> Self {
        let scale = match (self.value_range, target) {
            (ValueRange::Byte, ValueRange::Unit) => 1.0 / 255.0,
            (ValueRange::Unit, ValueRange::Byte) => 255.0,
            _ => 1.0,
        };
        let data = self.data.iter().map(|v| v * scale).collect();
        Self::from_raw(self.shape(), data, target)
    }

    pub fn with_data(&self, data: Vec<f64>) -> Self {
        Self::from_raw(self.shape(), data, self.value_range)
    }

    pub fn same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: fmt_shape(self.shape()),
                actual: fmt_shape(other.shape()),
            });
        }
        Ok(())
    }
}

pub(crate) fn fmt_shape((c, h, w): (usize, usize, usize)) -> String {
    format!("{c}x{h}x{w}")
}

/// Flattens an image into its `R^D` vector (row-major `(c, h, w)`).
pub fn flatten(img: &ImageTensor) -> Vec<f64> {
    img.data.clone()
}

/// Inverse of [`flatten`].
pub fn unflatten(
    v: &[f64],
    shape: (usize, usize, usize),
    value_range: ValueRange,
) -> Result<ImageTensor> {
    let (c, h, w) = shape;
    if v.len() != c * h * w {
        return Err(Error::DimensionMismatch {
            expected: c * h * w,
            actual: v.len(),
        });
    }
    Ok(ImageTensor::from_raw(shape, v.to_vec(), value_range))
}

/// Mean squared error over all `C·H·W` elements.
pub fn mse(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    x.same_shape(y)?;
    let sum: f64 = x
        .data
        .iter()
        .zip(&y.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / x.dim() as f64)
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` when the images are identical.
pub fn psnr(x: &ImageTensor, y: &ImageTensor, max_value: f64) -> Result<f64> {
    if !(max_value > 0.0) {
        return Err(Error::param("max_value", "must be positive"));
    }
    let mse = mse(x, y)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_value * max_value / mse).log10())
}

/// A `K`-bit message with entries in `{-1, +1}`.
///
/// Ordering is lexicographic with `-1 < +1`. Serializes as a `+`/`-` string.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Message(Vec<i8>);

impl TryFrom<String> for Message {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Self::parse(&s)
    }
}

impl From<Message> for String {
    fn from(m: Message) -> String {
        m.to_plus_minus()
    }
}

impl Message {
    pub fn new(bits: Vec<i8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::Empty("message"));
        }
        if let Some(b) = bits.iter().find(|b| **b != 1 && **b != -1) {
            return Err(Error::InvalidValue(format!(
                "message bit {b} is not -1 or +1"
            )));
        }
        Ok(Self(bits))
    }

    /// Parses `+`/`-` or `1`/`0` characters (`1` means `+1`).
    pub fn parse(s: &str) -> Result<Self> {
        let bits = s
            .trim()
            .chars()
            .map(|c| match c {
                '+' | '1' => Ok(1),
                '-' | '0' => Ok(-1),
                other => Err(Error::Format {
                    what: "message",
                    reason: format!("unexpected character {other:?}"),
                }),
            })
            .collect::<Result<Vec<i8>>>()?;
        Self::new(bits)
    }

    pub fn bits(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bit(&self, k: usize) -> f64 {
        f64::from(self.0[k])
    }

    pub fn negated(&self) -> Self {
        Self(self.0.iter().map(|b| -b).collect())
    }

    pub fn to_plus_minus(&self) -> String {
        self.0
            .iter()
            .map(|b| if *b > 0 { '+' } else { '-' })
            .collect()
    }

    pub fn dot(&self, v: &[f64]) -> f64 {
        self.0.iter().zip(v).map(|(b, x)| f64::from(*b) * x).sum()
    }
}

impl std::fmt::Display for Message {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_plus_minus())
    }
}

/// Deterministic random stream identified by `(seed, stream_id)`.
///
/// Streams with different ids never share state, so workers can each own one.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Independent stream under the same seed.
    pub fn fork(&self, stream_id: u64) -> Self {
        Self::new(self.seed, stream_id)
    }

    /// Child stream mixing this stream's id with a sub-index, for nested loops.
    pub fn derive(&self, sub: u64) -> Self {
        Self::new(self.seed, splitmix(self.stream_id ^ splitmix(sub)))
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.sample(rand_distr::StandardNormal)
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Draws `k` i.i.d. uniform bits from `{-1, +1}`.
pub fn sample_uniform_message(k: usize, rng: &mut SeededRng) -> Result<Message> {
    if k == 0 {
        return Err(Error::param("K", "must be at least 1"));
    }
    let bits = (0..k)
        .map(|_| if rng.random::<bool>() { 1 } else { -1 })
        .collect();
    Ok(Message(bits))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // four accumulators keep the loop vectorizable
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in 4 * chunks..a.len() {
        s += a[j] * b[j];
    }
    s
}

pub(crate) fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}
