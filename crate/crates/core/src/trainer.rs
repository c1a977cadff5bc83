//! Watermark training: minibatch SGD over random messages and distortions,
//! followed by dataset-level averaging into a fixed [`WatermarkSet`].

use std::io::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distortions::{
    apply_with_adjoint, identity_pool, sample_channel, validate_pool, Distortion, DistortionSpec,
};
use crate::error::{Error, Result};
use crate::loss::MarginLoss;
use crate::tensor::{
    dot, flatten, fmt_shape, norm_sq, sample_uniform_message, unflatten, ImageTensor, Message,
    SeededRng, ValueRange,
};

/// Images per parallel work unit. Fixed so reductions are thread-count independent.
const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    IdentityDownsample,
    FrozenRandomProjection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub kind: FeatureKind,
    pub d_f: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            kind: FeatureKind::IdentityDownsample,
            d_f: 16,
            seed: 0,
        }
    }
}

/// A frozen linear feature map from images to `R^{d_f}`.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    kind: FeatureKind,
    d_f: usize,
    seed: u64,
    shape: (usize, usize, usize),
    /// `d_f × D`, present for projections.
    projection: Option<DMatrix<f64>>,
    grid: (usize, usize),
}

impl FeatureExtractor {
    pub fn new(spec: &FeatureSpec, shape: (usize, usize, usize)) -> Result<Self> {
        let (c, h, w) = shape;
        let dim = c * h * w;
        if spec.d_f == 0 || spec.d_f >= dim {
            return Err(Error::param("d_f", format!("need 0 < d_f < D = {dim}")));
        }
        match spec.kind {
            FeatureKind::FrozenRandomProjection => {
                let mut rng = SeededRng::new(spec.seed, 0);
                let scale = 1.0 / (spec.d_f as f64).sqrt();
                let p = DMatrix::from_fn(spec.d_f, dim, |_, _| scale * rng.standard_normal());
                Ok(Self {
                    kind: spec.kind,
                    d_f: spec.d_f,
                    seed: spec.seed,
                    shape,
                    projection: Some(p),
                    grid: (0, 0),
                })
            }
            FeatureKind::IdentityDownsample => {
                if !spec.d_f.is_multiple_of(c) {
                    return Err(Error::param("d_f", "must be a multiple of the channel count"));
                }
                let cells = spec.d_f / c;
                let grid = if h == 1 {
                    (1, cells)
                } else {
                    let g = (cells as f64).sqrt().round() as usize;
                    if g * g != cells {
                        return Err(Error::param(
                            "d_f",
                            "per-channel cell count must be a perfect square",
                        ));
                    }
                    (g, g)
                };
                if grid.0 > h || grid.1 > w {
                    return Err(Error::param("d_f", "grid larger than the image"));
                }
                Ok(Self {
                    kind: spec.kind,
                    d_f: spec.d_f,
                    seed: spec.seed,
                    shape,
                    projection: None,
                    grid,
                })
            }
        }
    }

    /// Projection with an explicit matrix (`d_f × D`, `d_f ≤ D`).
    pub fn from_matrix(p: DMatrix<f64>, shape: (usize, usize, usize)) -> Result<Self> {
        let dim = shape.0 * shape.1 * shape.2;
        if p.ncols() != dim || p.nrows() == 0 || p.nrows() > dim {
            return Err(Error::ShapeMismatch {
                expected: format!("d_f×{dim} with d_f ≤ {dim}"),
                actual: format!("{}×{}", p.nrows(), p.ncols()),
            });
        }
        Ok(Self {
            kind: FeatureKind::FrozenRandomProjection,
            d_f: p.nrows(),
            seed: 0,
            shape,
            projection: Some(p),
            grid: (0, 0),
        })
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn output_dim(&self) -> usize {
        self.d_f
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn extract(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        if img.shape() != self.shape {
            return Err(Error::ShapeMismatch {
                expected: fmt_shape(self.shape),
                actual: fmt_shape(img.shape()),
            });
        }
        Ok(self.extract_raw(img.data()))
    }

    fn extract_raw(&self, x: &[f64]) -> Vec<f64> {
        match &self.projection {
            Some(p) => (0..p.nrows())
                .map(|r| p.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
                .collect(),
            None => {
                let (c_n, h_n, w_n) = self.shape;
                let (gh, gw) = self.grid;
                let mut out = Vec::with_capacity(self.d_f);
                for c in 0..c_n {
                    for i in 0..gh {
                        let (h0, h1) = (i * h_n / gh, (i + 1) * h_n / gh);
                        for j in 0..gw {
                            let (w0, w1) = (j * w_n / gw, (j + 1) * w_n / gw);
                            let mut acc = 0.0;
                            for h in h0..h1 {
                                let row = (c * h_n + h) * w_n;
                                acc += x[row + w0..row + w1].iter().sum::<f64>();
                            }
                            out.push(acc / ((h1 - h0) * (w1 - w0)) as f64);
                        }
                    }
                }
                out
            }
        }
    }
}

/// `ψ(img)`.
pub fn extract_features(psi: &FeatureExtractor, img: &ImageTensor) -> Result<Vec<f64>> {
    psi.extract(img)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    /// The per-image watermark is a learned vector.
    #[default]
    Constant,
    /// `b_k + U_k ψ(x)`.
    Affine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    #[default]
    Cosine,
}

/// Per-bit watermark map `g_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct WatermarkMap {
    pub bias: Vec<f64>,
    /// Row-major `D × d_f`, present for affine maps.
    pub matrix: Option<Vec<f64>>,
}

impl WatermarkMap {
    pub fn kind(&self) -> MapKind {
        if self.matrix.is_some() {
            MapKind::Affine
        } else {
            MapKind::Constant
        }
    }

    /// `g_k(f)`; `features` is ignored for constant maps.
    pub fn evaluate(&self, features: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        if let Some(u) = &self.matrix {
            let d_f = features.len();
            for (i, o) in out.iter_mut().enumerate() {
                *o += dot(&u[i * d_f..(i + 1) * d_f], features);
            }
        }
        out
    }

    fn zeros_like(&self) -> Self {
        Self {
            bias: vec![0.0; self.bias.len()],
            matrix: self.matrix.as_ref().map(|m| vec![0.0; m.len()]),
        }
    }

    fn scale(&mut self, c: f64) {
        self.bias.iter_mut().for_each(|a| *a *= c);
        if let Some(m) = self.matrix.as_mut() {
            m.iter_mut().for_each(|a| *a *= c);
        }
    }

    fn for_each_pair(&mut self, other: &WatermarkMap, mut f: impl FnMut(&mut f64, f64)) {
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            f(a, *b);
        }
        if let (Some(a), Some(b)) = (self.matrix.as_mut(), other.matrix.as_ref()) {
            for (x, y) in a.iter_mut().zip(b) {
                f(x, *y);
            }
        }
    }

    fn sq_norm(&self) -> f64 {
        norm_sq(&self.bias) + self.matrix.as_ref().map_or(0.0, |m| norm_sq(m))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(alias = "K")]
    pub bits: usize,
    /// Penalty weight before division by `D`.
    pub beta_alg: f64,
    #[serde(default = "default_loss")]
    pub loss: MarginLoss,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Multiplied by `D / mean ‖x‖²` to get the step size.
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Fraction of final steps whose iterates are averaged.
    #[serde(default = "default_tail")]
    pub tail_average: f64,
    /// Leading directions of the data second moment whose steps are damped
    /// down to the mean eigenvalue. 0 disables.
    #[serde(default)]
    pub precondition_rank: usize,
    /// Subtract a zero-mean message control variate from each gradient.
    #[serde(default = "default_true")]
    pub control_variate: bool,
    #[serde(default = "identity_pool")]
    pub distortion_pool: Vec<DistortionSpec>,
    #[serde(default)]
    pub map_kind: MapKind,
    #[serde(default)]
    pub features: FeatureSpec,
    #[serde(default)]
    pub seed: u64,
}

fn default_loss() -> MarginLoss {
    MarginLoss::Hinge
}
fn default_epochs() -> usize {
    10
}
fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    0.05
}
fn default_momentum() -> f64 {
    0.9
}
fn default_true() -> bool {
    true
}
fn default_tail() -> f64 {
    0.25
}

impl TrainConfig {
    pub fn new(bits: usize, beta_alg: f64) -> Self {
        Self {
            bits,
            beta_alg,
            loss: default_loss(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            lr_schedule: LrSchedule::default(),
            momentum: default_momentum(),
            tail_average: default_tail(),
            precondition_rank: 0,
            control_variate: true,
            distortion_pool: identity_pool(),
            map_kind: MapKind::Constant,
            features: FeatureSpec::default(),
            seed: 0,
        }
    }

    /// Config whose penalty equals `beta_theory` for dimension `dim`.
    pub fn with_theory_beta(bits: usize, beta_theory: f64, dim: usize) -> Self {
        Self::new(bits, beta_theory * dim as f64)
    }

    pub fn beta_theory(&self, dim: usize) -> f64 {
        self.beta_alg / dim as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits == 0 {
            return Err(Error::param("bits", "must be at least 1"));
        }
        if !(self.beta_alg > 0.0) || !self.beta_alg.is_finite() {
            return Err(Error::param("beta_alg", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::param("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::param("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param("momentum", "must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.tail_average) {
            return Err(Error::param("tail_average", "must be in [0, 1)"));
        }
        validate_pool(&self.distortion_pool)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let hash = Sha256::digest(&json);
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `R = sqrt(K (V(0) - inf V) / β)`.
pub fn feasible_ball_radius(bits: usize, loss: MarginLoss, beta_theory: f64) -> f64 {
    (bits as f64 * (loss.at_zero() - loss.infimum()) / beta_theory).sqrt()
}

/// High-probability uniform deviation between the finite-sample and
/// population objectives.
pub fn uniform_deviation_bound(
    n: usize,
    delta: f64,
    bits: usize,
    lipschitz: f64,
    radius: f64,
    trace_sigma_x: f64,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::param("n", "must be at least 1"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::param("delta", "must lie in (0, 1)"));
    }
    let nf = n as f64;
    let l4 = (4.0 / delta).ln();
    let first = (4.0 + 25.0 / 3.0 * l4.sqrt()) / nf.sqrt();
    let c = 75.0 * (2.0 * std::f64::consts::E).ln() / (2.0 * std::f64::consts::LN_2);
    let second = c * (4.0 * nf / delta).ln() * l4 / nf;
    Ok(lipschitz * radius * (bits as f64 * trace_sigma_x).sqrt() * (first + second))
}

/// Header stored in front of the vector payload of a `.addwm` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WatermarkHeader {
    #[serde(rename = "K")]
    pub bits: usize,
    #[serde(rename = "D")]
    pub dim: usize,
    pub shape: [usize; 3],
    pub value_range: ValueRange,
    pub loss: Option<MarginLoss>,
    pub beta_alg: Option<f64>,
    pub seed: Option<u64>,
    pub config_digest: Option<String>,
}

/// `K` fixed watermark vectors for images of one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct WatermarkSet {
    header: WatermarkHeader,
    vectors: Vec<Vec<f64>>,
}

impl WatermarkSet {
    pub fn new(
        vectors: Vec<Vec<f64>>,
        shape: (usize, usize, usize),
        value_range: ValueRange,
    ) -> Result<Self> {
        if vectors.is_empty() {
            return Err(Error::Empty("watermark vectors"));
        }
        let dim = shape.0 * shape.1 * shape.2;
        for v in &vectors {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidValue("non-finite watermark entry".into()));
            }
        }
        Ok(Self {
            header: WatermarkHeader {
                bits: vectors.len(),
                dim,
                shape: [shape.0, shape.1, shape.2],
                value_range,
                loss: None,
                beta_alg: None,
                seed: None,
                config_digest: None,
            },
            vectors,
        })
    }

    /// Vectors of length `D` laid out as `1×1×D` unbounded tensors.
    pub fn from_vectors(vectors: Vec<Vec<f64>>) -> Result<Self> {
        let dim = vectors.first().map_or(0, Vec::len);
        Self::new(vectors, (1, 1, dim), ValueRange::Unbounded)
    }

    pub fn zeros(bits: usize, shape: (usize, usize, usize), value_range: ValueRange) -> Result<Self> {
        let dim = shape.0 * shape.1 * shape.2;
        Self::new(vec![vec![0.0; dim]; bits], shape, value_range)
    }

    fn with_provenance(mut self, cfg: &TrainConfig) -> Self {
        self.header.loss = Some(cfg.loss);
        self.header.beta_alg = Some(cfg.beta_alg);
        self.header.seed = Some(cfg.seed);
        self.header.config_digest = Some(cfg.digest());
        self
    }

    pub fn bits(&self) -> usize {
        self.header.bits
    }

    pub fn dim(&self) -> usize {
        self.header.dim
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let [c, h, w] = self.header.shape;
        (c, h, w)
    }

    pub fn value_range(&self) -> ValueRange {
        self.header.value_range
    }

    pub fn header(&self) -> &WatermarkHeader {
        &self.header
    }

    pub fn config_digest(&self) -> Option<&str> {
        self.header.config_digest.as_deref()
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn vector(&self, k: usize) -> &[f64] {
        &self.vectors[k]
    }

    pub fn norms_sq(&self) -> Vec<f64> {
        self.vectors.iter().map(|v| norm_sq(v)).collect()
    }

    pub fn total_energy(&self) -> f64 {
        self.norms_sq().iter().sum()
    }

    /// `w_k` as an image.
    pub fn as_image(&self, k: usize) -> ImageTensor {
        unflatten(&self.vectors[k], self.shape(), ValueRange::Unbounded)
            .expect("watermark length matches its shape")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&self.header).expect("header serializes");
        out.push(b'\n');
        out.reserve(4 * self.bits() * self.dim());
        for v in &self.vectors {
            for x in v {
                out.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(raw: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            what: "watermark file",
            reason: reason.to_string(),
        };
        let nl = raw
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| bad("missing header terminator"))?;
        let header: WatermarkHeader = serde_json::from_slice(&raw[..nl])?;
        let [c, h, w] = header.shape;
        if header.bits == 0 || header.dim == 0 || c * h * w != header.dim {
            return Err(bad("inconsistent K, D or shape"));
        }
        let payload = &raw[nl + 1..];
        if payload.len() != 4 * header.bits * header.dim {
            return Err(bad(&format!(
                "expected {} payload bytes, found {}",
                4 * header.bits * header.dim,
                payload.len()
            )));
        }
        let flat: Vec<f64> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let vectors = flat.chunks(header.dim).map(<[f64]>::to_vec).collect();
        let mut set = Self::new(vectors, (c, h, w), header.value_range)?;
        set.header = header;
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&raw)
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub penalty: f64,
    pub min_norm_sq: f64,
    pub max_norm_sq: f64,
}

pub fn write_log_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub watermark: WatermarkSet,
    pub maps: Vec<WatermarkMap>,
    pub log: Vec<EpochLog>,
    pub steps: usize,
}

/// One minibatch in flattened form. Messages and per-image distortion
/// streams are fixed so the loss is a deterministic function of the maps.
pub struct Minibatch<'a> {
    pub images: Vec<&'a [f64]>,
    /// Empty for constant maps.
    pub features: Vec<&'a [f64]>,
    pub messages: Vec<Message>,
    pub distortion: &'a Distortion,
    pub streams: Vec<SeededRng>,
    pub shape: (usize, usize, usize),
    pub value_range: ValueRange,
}

/// Mean minibatch loss `B⁻¹ Σ_i [Σ_k V(m_k ⟨w_ik, A(x̃_i)⟩) + β Σ_k ‖w_ik‖²]`
/// and its gradient with respect to the map parameters.
pub fn minibatch_objective(
    maps: &[WatermarkMap],
    batch: &Minibatch<'_>,
    loss: MarginLoss,
    beta_theory: f64,
) -> Result<(f64, Vec<WatermarkMap>)> {
    objective_parts(maps, batch, loss, beta_theory).map(|(v, g, _)| (v, g))
}

/// Loss, gradient and the per-image loss derivatives `V'(t_ik)`.
fn objective_parts(
    maps: &[WatermarkMap],
    batch: &Minibatch<'_>,
    loss: MarginLoss,
    beta_theory: f64,
) -> Result<(f64, Vec<WatermarkMap>, Vec<Vec<f64>>)> {
    let b = batch.images.len();
    if b == 0 {
        return Err(Error::Empty("minibatch"));
    }
    let partials: Vec<Result<(f64, Vec<WatermarkMap>, Vec<Vec<f64>>)>> = (0..b)
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map(|idx| {
            let mut grad: Vec<WatermarkMap> = maps.iter().map(WatermarkMap::zeros_like).collect();
            let mut total = 0.0;
            let mut slopes = Vec::with_capacity(idx.len());
            for &i in idx {
                let (v, g) = accumulate_one(maps, batch, i, loss, beta_theory, &mut grad)?;
                total += v;
                slopes.push(g);
            }
            Ok((total, grad, slopes))
        })
        .collect();
    let mut grad: Vec<WatermarkMap> = maps.iter().map(WatermarkMap::zeros_like).collect();
    let mut total = 0.0;
    let mut slopes = Vec::with_capacity(b);
    for p in partials {
        let (l, g, s) = p?;
        total += l;
        slopes.extend(s);
        for (acc, part) in grad.iter_mut().zip(&g) {
            acc.for_each_pair(part, |a, x| *a += x);
        }
    }
    let inv = 1.0 / b as f64;
    for g in grad.iter_mut() {
        g.scale(inv);
    }
    Ok((total * inv, grad, slopes))
}

/// Zero-mean correction `B⁻¹ Σ_i c_ik m_ik A_i(x_i)` for bit `k`, where `c_ik`
/// is the leave-one-out batch mean of `V'(t_jk)`. Since `m_ik` is independent
/// of `c_ik` and of the clean distorted image, subtracting it leaves the
/// expected gradient unchanged while cancelling most of the message noise.
fn message_control_variate(
    maps: &[WatermarkMap],
    batch: &Minibatch<'_>,
    slopes: &[Vec<f64>],
) -> Result<Vec<WatermarkMap>> {
    let b = batch.images.len();
    let k_bits = maps.len();
    let mut zero = maps.iter().map(WatermarkMap::zeros_like).collect::<Vec<_>>();
    if b < 2 {
        return Ok(zero);
    }
    let totals: Vec<f64> = (0..k_bits).map(|k| slopes.iter().map(|g| g[k]).sum()).collect();
    let partials: Vec<Result<Vec<WatermarkMap>>> = (0..b)
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map(|idx| {
            let mut acc: Vec<WatermarkMap> = maps.iter().map(WatermarkMap::zeros_like).collect();
            for &i in idx {
                let clean = if matches!(batch.distortion, Distortion::Identity) {
                    batch.images[i].to_vec()
                } else {
                    let img = ImageTensor::from_raw(batch.shape, batch.images[i].to_vec(), batch.value_range);
                    let mut stream = batch.streams[i].clone();
                    apply_with_adjoint(batch.distortion, &img, &mut stream)?.0.into_data()
                };
                let f = batch.features.get(i).copied().unwrap_or(&[]);
                for k in 0..k_bits {
                    let c = (totals[k] - slopes[i][k]) / (b - 1) as f64 * batch.messages[i].bit(k);
                    if c == 0.0 {
                        continue;
                    }
                    for (a, x) in acc[k].bias.iter_mut().zip(&clean) {
                        *a += c * x;
                    }
                    if let Some(mat) = acc[k].matrix.as_mut() {
                        let d_f = f.len();
                        for (p, x) in clean.iter().enumerate() {
                            for (r, fv) in mat[p * d_f..(p + 1) * d_f].iter_mut().zip(f) {
                                *r += c * x * fv;
                            }
                        }
                    }
                }
            }
            Ok(acc)
        })
        .collect();
    for p in partials {
        for (z, part) in zero.iter_mut().zip(&p?) {
            z.for_each_pair(part, |a, x| *a += x);
        }
    }
    for z in zero.iter_mut() {
        z.scale(1.0 / b as f64);
    }
    Ok(zero)
}

fn accumulate_one(
    maps: &[WatermarkMap],
    batch: &Minibatch<'_>,
    i: usize,
    loss: MarginLoss,
    beta: f64,
    grad: &mut [WatermarkMap],
) -> Result<(f64, Vec<f64>)> {
    let x = batch.images[i];
    let m = &batch.messages[i];
    let k_bits = maps.len();
    let empty: &[f64] = &[];
    let f = batch.features.get(i).copied().unwrap_or(empty);
    let owned: Vec<Vec<f64>>;
    let w: Vec<&[f64]> = if f.is_empty() {
        maps.iter().map(|g| g.bias.as_slice()).collect()
    } else {
        owned = maps.iter().map(|g| g.evaluate(f)).collect();
        owned.iter().map(Vec::as_slice).collect()
    };

    let mut xt = x.to_vec();
    for (k, wk) in w.iter().enumerate() {
        let mk = m.bit(k);
        for (a, b) in xt.iter_mut().zip(wk.iter()) {
            *a += mk * b;
        }
    }
    let img = ImageTensor::from_raw(batch.shape, xt, batch.value_range);
    let mut stream = batch.streams[i].clone();
    let (y, adjoint) = apply_with_adjoint(batch.distortion, &img, &mut stream)?;
    let y = y.data();

    let mut value = 0.0;
    let mut g = vec![0.0; k_bits];
    for k in 0..k_bits {
        let t = m.bit(k) * dot(w[k], y);
        value += loss.value(t);
        g[k] = loss.subgradient(t);
    }
    // s = Σ_k g_k m_k w_k, pulled back through the distortion
    let mut s = vec![0.0; x.len()];
    for k in 0..k_bits {
        let c = g[k] * m.bit(k);
        if c != 0.0 {
            for (a, b) in s.iter_mut().zip(w[k]) {
                *a += c * b;
            }
        }
    }
    let u = if adjoint.is_identity() {
        s
    } else {
        adjoint.apply(&s, batch.shape)
    };
    for l in 0..k_bits {
        let ml = m.bit(l);
        let wl = w[l];
        value += beta * norm_sq(wl);
        // ∂/∂w_l = m_l (g_l A(x̃) + J_Aᵀ s) + 2β w_l
        let gl = g[l];
        let dw = |p: usize| ml * (gl * y[p] + u[p]) + 2.0 * beta * wl[p];
        for (p, a) in grad[l].bias.iter_mut().enumerate() {
            *a += dw(p);
        }
        if let Some(mat) = grad[l].matrix.as_mut() {
            let d_f = f.len();
            for p in 0..x.len() {
                let dv = dw(p);
                let row = &mut mat[p * d_f..(p + 1) * d_f];
                for (r, fv) in row.iter_mut().zip(f) {
                    *r += dv * fv;
                }
            }
        }
    }
    Ok((value, g))
}

fn check_data(data: &[ImageTensor]) -> Result<((usize, usize, usize), ValueRange)> {
    let first = data.first().ok_or(Error::Empty("training data"))?;
    for img in data {
        first.same_shape(img)?;
    }
    Ok((first.shape(), first.value_range()))
}

/// Trains `K` watermark maps and returns their dataset-level averages.
pub fn train(data: &[ImageTensor], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (shape, range) = check_data(data)?;
    let n = data.len();
    let dim = shape.0 * shape.1 * shape.2;
    let beta = cfg.beta_theory(dim);
    let radius = feasible_ball_radius(cfg.bits, cfg.loss, beta);

    let psi = match cfg.map_kind {
        MapKind::Constant => None,
        MapKind::Affine => Some(FeatureExtractor::new(&cfg.features, shape)?),
    };
    let feats: Vec<Vec<f64>> = match &psi {
        Some(p) => data.iter().map(|x| p.extract_raw(x.data())).collect(),
        None => Vec::new(),
    };

    let energy = data.iter().map(|x| norm_sq(x.data())).sum::<f64>() / (n * dim) as f64;
    let step0 = cfg.learning_rate / if energy > 0.0 { energy } else { 1.0 };
    let precond = Preconditioner::fit(data, cfg.precondition_rank, energy);

    let mut init_rng = SeededRng::new(cfg.seed, 0);
    let init_norm = 0.1 * radius / (cfg.bits as f64).sqrt();
    let mut maps: Vec<WatermarkMap> = (0..cfg.bits)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| init_rng.standard_normal()).collect();
            let s = init_norm / norm_sq(&v).sqrt();
            WatermarkMap {
                bias: v.iter().map(|x| x * s).collect(),
                matrix: psi.as_ref().map(|p| vec![0.0; dim * p.output_dim()]),
            }
        })
        .collect();
    let mut velocity: Vec<WatermarkMap> = maps.iter().map(WatermarkMap::zeros_like).collect();

    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let tail_start = ((1.0 - cfg.tail_average) * total_steps as f64).floor() as usize;
    let mut average: Option<Vec<WatermarkMap>> = None;
    let mut averaged = 0usize;

    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut epoch_rng = SeededRng::new(cfg.seed, 1).derive(epoch as u64);
        order.shuffle(&mut epoch_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut step_rng = SeededRng::new(cfg.seed, 2).derive(step as u64);
            let spec = sample_channel(&cfg.distortion_pool, &mut step_rng)?;
            let messages = chunk
                .iter()
                .map(|_| sample_uniform_message(cfg.bits, &mut step_rng))
                .collect::<Result<Vec<_>>>()?;
            let streams = (0..chunk.len()).map(|j| step_rng.derive(j as u64)).collect();
            let batch = Minibatch {
                images: chunk.iter().map(|&i| data[i].data()).collect(),
                features: if feats.is_empty() {
                    Vec::new()
                } else {
                    chunk.iter().map(|&i| feats[i].as_slice()).collect()
                },
                messages,
                distortion: &spec.distortion,
                streams,
                shape,
                value_range: range,
            };
            let lr = match cfg.lr_schedule {
                LrSchedule::Constant => step0,
                LrSchedule::Cosine => {
                    step0 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
                }
            };
            let (value, mut grad, slopes) = objective_parts(&maps, &batch, cfg.loss, beta)?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    learning_rate: lr,
                });
            }
            loss_sum += value * chunk.len() as f64;
            if cfg.control_variate {
                let cv = message_control_variate(&maps, &batch, &slopes)?;
                for (g, c) in grad.iter_mut().zip(&cv) {
                    g.for_each_pair(c, |a, x| *a -= x);
                }
            }
            if let Some(pc) = &precond {
                grad.iter_mut().for_each(|g| pc.apply(&mut g.bias));
            }
            for ((p, v), g) in maps.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                v.for_each_pair(g, |a, b| *a = cfg.momentum * *a + b);
                p.for_each_pair(v, |a, b| *a -= lr * b);
            }
            if maps.iter().any(|m| !m.sq_norm().is_finite()) {
                return Err(Error::NonFiniteLoss {
                    step,
                    learning_rate: lr,
                });
            }
            project_to_ball(&mut maps, radius);
            step += 1;
            if step > tail_start {
                let avg = average.get_or_insert_with(|| maps.iter().map(WatermarkMap::zeros_like).collect());
                averaged += 1;
                let wgt = 1.0 / averaged as f64;
                for (a, p) in avg.iter_mut().zip(&maps) {
                    a.for_each_pair(p, |x, y| *x += wgt * (y - *x));
                }
            }
        }
        let norms: Vec<f64> = maps.iter().map(|m| norm_sq(&m.bias)).collect();
        log.push(EpochLog {
            epoch,
            mean_loss: loss_sum / n as f64,
            penalty: beta * norms.iter().sum::<f64>(),
            min_norm_sq: norms.iter().cloned().fold(f64::INFINITY, f64::min),
            max_norm_sq: norms.iter().cloned().fold(0.0, f64::max),
        });
    }
    if let Some(avg) = average {
        maps = avg;
    }

    let vectors: Vec<Vec<f64>> = maps
        .iter()
        .map(|g| match &psi {
            None => g.bias.clone(),
            Some(_) => {
                let mut acc = vec![0.0; dim];
                for f in &feats {
                    for (a, b) in acc.iter_mut().zip(g.evaluate(f)) {
                        *a += b;
                    }
                }
                acc.iter().map(|a| a / n as f64).collect()
            }
        })
        .collect();
    let watermark = WatermarkSet::new(vectors, shape, range)?.with_provenance(cfg);
    debug_assert!(watermark.total_energy() <= radius * radius * (1.0 + 1e-9) || psi.is_some());
    Ok(TrainOutcome {
        watermark,
        maps,
        log,
        steps: total_steps,
    })
}

/// Damps the step along the leading eigenvectors `v_j` of the uncentered
/// second moment `M = E[x xᵀ]`: `P = I − Σ_j (1 − τ/λ_j) v_j v_jᵀ`, with `τ`
/// the mean eigenvalue. `P` is fixed and positive definite, so the
/// stationary points are unchanged.
struct Preconditioner {
    directions: Vec<Vec<f64>>,
    shrink: Vec<f64>,
}

/// Images used to estimate the leading directions.
const PRECONDITION_SAMPLE: usize = 1024;

impl Preconditioner {
    fn fit(data: &[ImageTensor], rank: usize, floor: f64) -> Option<Self> {
        if rank == 0 || !(floor > 0.0) {
            return None;
        }
        let n = data.len();
        let take = n.min(PRECONDITION_SAMPLE);
        let rows: Vec<&[f64]> = (0..take).map(|i| data[i * n / take].data()).collect();
        let dim = rows[0].len();
        let (values, vectors) = if dim <= take {
            let mut m = DMatrix::<f64>::zeros(dim, dim);
            for r in &rows {
                let v = DMatrix::from_column_slice(dim, 1, r);
                m.ger(1.0 / take as f64, &v.column(0), &v.column(0), 1.0);
            }
            let eig = m.symmetric_eigen();
            let vecs: Vec<Vec<f64>> = (0..dim).map(|j| eig.eigenvectors.column(j).iter().copied().collect()).collect();
            (eig.eigenvalues.iter().copied().collect::<Vec<_>>(), vecs)
        } else {
            // Gram trick: eigenvectors of X Xᵀ/m mapped back through Xᵀ.
            let gram = DMatrix::from_fn(take, take, |i, j| dot(rows[i], rows[j]) / take as f64);
            let eig = gram.symmetric_eigen();
            let vecs: Vec<Vec<f64>> = (0..take)
                .map(|j| {
                    let mut v = vec![0.0; dim];
                    for (i, r) in rows.iter().enumerate() {
                        let c = eig.eigenvectors[(i, j)];
                        for (a, b) in v.iter_mut().zip(r.iter()) {
                            *a += c * b;
                        }
                    }
                    let nv = norm_sq(&v).sqrt();
                    if nv > 0.0 {
                        v.iter_mut().for_each(|a| *a /= nv);
                    }
                    v
                })
                .collect();
            (eig.eigenvalues.iter().copied().collect::<Vec<_>>(), vecs)
        };
        let mut idx: Vec<usize> = (0..values.len()).collect();
        idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
        let mut directions = Vec::new();
        let mut shrink = Vec::new();
        for &j in idx.iter().take(rank) {
            if values[j] <= floor {
                break;
            }
            directions.push(vectors[j].clone());
            shrink.push(1.0 - floor / values[j]);
        }
        if directions.is_empty() {
            None
        } else {
            Some(Self { directions, shrink })
        }
    }

    fn apply(&self, g: &mut [f64]) {
        for (v, c) in self.directions.iter().zip(&self.shrink) {
            let a = c * dot(v, g);
            for (x, y) in g.iter_mut().zip(v) {
                *x -= a * y;
            }
        }
    }
}

/// Scales the biases back onto the `R`-ball when they leave it.
fn project_to_ball(maps: &mut [WatermarkMap], radius: f64) {
    let total: f64 = maps.iter().map(|m| norm_sq(&m.bias)).sum();
    if total > radius * radius {
        let s = radius / total.sqrt();
        for m in maps.iter_mut() {
            m.bias.iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Training data given as plain vectors (`1×1×D`, unbounded).
pub fn vectors_as_images(data: &[Vec<f64>]) -> Vec<ImageTensor> {
    data.iter()
        .map(|x| ImageTensor::from_raw((1, 1, x.len()), x.clone(), ValueRange::Unbounded))
        .collect()
}

/// Flattens every image.
pub fn flatten_all(data: &[ImageTensor]) -> Vec<Vec<f64>> {
    data.iter().map(flatten).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distortions::Distortion;
    use crate::loss::{objective_finite, MessageSampling};
    use rand::Rng;

    #[test]
    fn ball_radius_examples() {
        let r = feasible_ball_radius(8, MarginLoss::Hinge, 0.05);
        assert!((r * r - 160.0).abs() < 1e-9);
        let r = feasible_ball_radius(1, MarginLoss::Logistic, std::f64::consts::LN_2);
        assert!((r * r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn deviation_bound_shape() {
        let tr = 32.0 + 128.0 * 0.09;
        let r = 160f64.sqrt();
        let mut prev = f64::INFINITY;
        for n in [8usize, 16, 64, 1000, 10_000, 100_000] {
            let e = uniform_deviation_bound(n, 0.05, 8, 1.0, r, tr).unwrap();
            let e2 = uniform_deviation_bound(2 * n, 0.05, 8, 1.0, r, tr).unwrap();
            assert!(e2 < e && e < prev);
            prev = e;
        }
        let a = uniform_deviation_bound(10_000, 0.05, 8, 1.0, r, tr).unwrap();
        let b = uniform_deviation_bound(10_000, 0.05, 8, 1.0, 2.0 * r, tr).unwrap();
        assert!((b / a - 2.0).abs() < 1e-12);
        assert!(a.is_finite() && a > 0.0);
        assert!(uniform_deviation_bound(10, 1.0, 8, 1.0, r, tr).is_err());
        assert!(uniform_deviation_bound(10, 0.0, 8, 1.0, r, tr).is_err());
    }

    #[test]
    fn deviation_bound_hand_value() {
        // n=100, δ=0.5: log(4/δ) = ln 8
        let l = 8f64.ln();
        let first = (4.0 + 25.0 / 3.0 * l.sqrt()) / 10.0;
        let c = 75.0 * (1.0 + std::f64::consts::LN_2) / (2.0 * std::f64::consts::LN_2);
        let second = c * 800f64.ln() * l / 100.0;
        let expect = 2.0 * 3.0 * (first + second);
        let got = uniform_deviation_bound(100, 0.5, 1, 1.0, 2.0, 9.0).unwrap();
        assert!((got - expect).abs() < 1e-12 * expect);
    }

    fn random_images(n: usize, shape: (usize, usize, usize), seed: u64) -> Vec<ImageTensor> {
        let mut rng = SeededRng::new(seed, 0);
        (0..n)
            .map(|_| {
                let d = shape.0 * shape.1 * shape.2;
                let data = (0..d).map(|_| rng.random::<f64>()).collect();
                ImageTensor::new(shape.0, shape.1, shape.2, data, ValueRange::Unit).unwrap()
            })
            .collect()
    }

    #[test]
    fn features_frozen_and_linear() {
        let shape = (3, 8, 8);
        let imgs = random_images(2, shape, 1);
        for spec in [
            FeatureSpec {
                kind: FeatureKind::IdentityDownsample,
                d_f: 12,
                seed: 0,
            },
            FeatureSpec {
                kind: FeatureKind::FrozenRandomProjection,
                d_f: 10,
                seed: 5,
            },
        ] {
            let psi = FeatureExtractor::new(&spec, shape).unwrap();
            let a = psi.extract(&imgs[0]).unwrap();
            assert_eq!(a, psi.extract(&imgs[0]).unwrap());
            assert_eq!(a.len(), spec.d_f);
            let scaled = ImageTensor::from_raw(
                shape,
                imgs[0].data().iter().map(|v| -2.5 * v).collect(),
                ValueRange::Unbounded,
            );
            let b = psi.extract(&scaled).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((y + 2.5 * x).abs() <= 1e-9 * x.abs().max(1.0));
            }
        }
        let wrong = random_images(1, (3, 4, 4), 2);
        let psi = FeatureExtractor::new(&FeatureSpec::default(), shape);
        assert!(psi.is_err() || psi.unwrap().extract(&wrong[0]).is_err());
    }

    #[test]
    fn identity_projection_is_flatten() {
        let shape = (1, 3, 4);
        let psi = FeatureExtractor::from_matrix(DMatrix::identity(12, 12), shape).unwrap();
        let img = &random_images(1, shape, 3)[0];
        assert_eq!(psi.extract(img).unwrap(), flatten(img));
    }

    #[test]
    fn downsample_averages_cells() {
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let img = ImageTensor::new(1, 4, 4, data, ValueRange::Unbounded).unwrap();
        let psi = FeatureExtractor::new(
            &FeatureSpec {
                kind: FeatureKind::IdentityDownsample,
                d_f: 4,
                seed: 0,
            },
            (1, 4, 4),
        )
        .unwrap();
        assert_eq!(psi.extract(&img).unwrap(), vec![2.5, 4.5, 10.5, 12.5]);
    }

    fn sample_maps(k: usize, dim: usize, d_f: usize, seed: u64) -> Vec<WatermarkMap> {
        let mut rng = SeededRng::new(seed, 9);
        (0..k)
            .map(|_| WatermarkMap {
                bias: (0..dim).map(|_| 0.4 * rng.standard_normal()).collect(),
                matrix: (d_f > 0)
                    .then(|| (0..dim * d_f).map(|_| 0.1 * rng.standard_normal()).collect()),
            })
            .collect()
    }

    fn flat_params(maps: &[WatermarkMap]) -> Vec<f64> {
        let mut v = Vec::new();
        for m in maps {
            v.extend_from_slice(&m.bias);
            if let Some(u) = &m.matrix {
                v.extend_from_slice(u);
            }
        }
        v
    }

    fn set_param(maps: &mut [WatermarkMap], mut idx: usize, value: f64) {
        for m in maps.iter_mut() {
            if idx < m.bias.len() {
                m.bias[idx] = value;
                return;
            }
            idx -= m.bias.len();
            if let Some(u) = m.matrix.as_mut() {
                if idx < u.len() {
                    u[idx] = value;
                    return;
                }
                idx -= u.len();
            }
        }
        panic!("index out of range");
    }

    fn check_gradient(distortion: Distortion, loss: MarginLoss, d_f: usize) {
        let shape = (2, 4, 4);
        let dim = 32;
        let imgs = random_images(6, shape, 7);
        let mut rng = SeededRng::new(3, 0);
        let feats: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..d_f).map(|_| rng.standard_normal()).collect())
            .collect();
        let maps = sample_maps(3, dim, d_f, 11);
        let batch = Minibatch {
            images: imgs.iter().map(|x| x.data()).collect(),
            features: feats.iter().map(Vec::as_slice).collect(),
            messages: (0..6)
                .map(|_| sample_uniform_message(3, &mut rng).unwrap())
                .collect(),
            distortion: &distortion,
            streams: (0..6).map(|j| SeededRng::new(4, j)).collect(),
            shape,
            value_range: ValueRange::Unit,
        };
        let beta = 0.3;
        let (_, grad) = minibatch_objective(&maps, &batch, loss, beta).unwrap();
        let g = flat_params(&grad);
        let p = flat_params(&maps);
        let h = 1e-6;
        let mut checked = 0;
        let mut pick = SeededRng::new(5, 0);
        while checked < 20 {
            let idx = pick.random_range(0..p.len());
            let mut plus = maps.clone();
            set_param(&mut plus, idx, p[idx] + h);
            let mut minus = maps.clone();
            set_param(&mut minus, idx, p[idx] - h);
            let (lp, _) = minibatch_objective(&plus, &batch, loss, beta).unwrap();
            let (lm, _) = minibatch_objective(&minus, &batch, loss, beta).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            // a hinge kink inside the stencil shows up as a jump; skip it
            let (l0, _) = minibatch_objective(&maps, &batch, loss, beta).unwrap();
            if ((lp - l0) - (l0 - lm)).abs() > 1e-7 {
                continue;
            }
            assert!(
                (fd - g[idx]).abs() <= 1e-4 * g[idx].abs().max(1e-2),
                "{}: fd {fd} vs analytic {}",
                distortion.name(),
                g[idx]
            );
            checked += 1;
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for loss in [MarginLoss::Hinge, MarginLoss::Logistic] {
            check_gradient(Distortion::Identity, loss, 0);
            check_gradient(Distortion::Brightness { factor: 1.3 }, loss, 0);
            check_gradient(Distortion::Contrast { factor: 0.8 }, loss, 0);
            check_gradient(Distortion::GaussianNoise { sigma: 0.05 }, loss, 0);
            check_gradient(
                Distortion::RandomErase {
                    fraction: 0.2,
                    count: 1,
                },
                loss,
                0,
            );
            check_gradient(Distortion::Identity, loss, 3);
        }
    }

    #[test]
    fn minibatch_matches_objective_for_single_message() {
        // with K=1 and both messages in the batch, the minibatch loss is the exhaustive objective
        let x = vec![0.3, -1.0, 0.5, 2.0];
        let w = vec![vec![0.2, 0.1, -0.4, 0.05]];
        let maps = vec![WatermarkMap {
            bias: w[0].clone(),
            matrix: None,
        }];
        let batch = Minibatch {
            images: vec![&x, &x],
            features: Vec::new(),
            messages: vec![Message::parse("+").unwrap(), Message::parse("-").unwrap()],
            distortion: &Distortion::Identity,
            streams: vec![SeededRng::new(0, 0), SeededRng::new(0, 1)],
            shape: (1, 1, 4),
            value_range: ValueRange::Unbounded,
        };
        let (l, _) = minibatch_objective(&maps, &batch, MarginLoss::Hinge, 0.1).unwrap();
        let expect = objective_finite(&w, std::slice::from_ref(&x), MarginLoss::Hinge, 0.1, MessageSampling::Exhaustive).unwrap();
        assert!((l - expect).abs() < 1e-12);
    }

    #[test]
    fn watermark_file_round_trip() {
        let set = WatermarkSet::new(
            vec![vec![0.5, -1.25, 3.0, 0.0, 1.0, 2.0], vec![1.0; 6]],
            (2, 1, 3),
            ValueRange::Unit,
        )
        .unwrap()
        .with_provenance(&TrainConfig::new(2, 1.0));
        let back = WatermarkSet::from_bytes(&set.to_bytes()).unwrap();
        assert_eq!(back, set);
        let mut raw = set.to_bytes();
        raw.pop();
        assert!(WatermarkSet::from_bytes(&raw).is_err());
        assert!(WatermarkSet::from_bytes(b"{}").is_err());
    }

    #[test]
    fn config_json_defaults_and_digest() {
        let cfg: TrainConfig = serde_json::from_str(r#"{"K": 4, "beta_alg": 6.4}"#).unwrap();
        assert_eq!(cfg.bits, 4);
        assert_eq!(cfg.epochs, 10);
        assert_eq!(cfg.distortion_pool, identity_pool());
        let mut other = cfg.clone();
        assert_eq!(cfg.digest(), other.digest());
        other.seed = 1;
        assert_ne!(cfg.digest(), other.digest());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"K": 4, "beta_alg": 1, "bogus": 1}"#).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = TrainConfig::new(2, 1.0);
        assert!(matches!(train(&[], &cfg), Err(Error::Empty(_))));
        let mut imgs = random_images(2, (1, 4, 4), 1);
        imgs.push(random_images(1, (1, 4, 5), 2).pop().unwrap());
        assert!(train(&imgs, &cfg).is_err());
        let mut bad = cfg.clone();
        bad.beta_alg = 0.0;
        assert!(train(&imgs[..2], &bad).is_err());
    }

    #[test]
    fn nonfinite_loss_is_reported() {
        let imgs = random_images(4, (1, 4, 4), 3);
        let mut cfg = TrainConfig::new(2, 1.0);
        cfg.learning_rate = 1e300;
        cfg.epochs = 3;
        match train(&imgs, &cfg) {
            Err(Error::NonFiniteLoss { learning_rate, .. }) => assert!(learning_rate > 0.0),
            other => panic!("expected non-finite loss, got {other:?}"),
        }
    }

    #[test]
    fn training_is_deterministic_and_bounded() {
        let imgs = random_images(40, (1, 6, 6), 4);
        let mut cfg = TrainConfig::new(3, 0.5 * 36.0);
        cfg.epochs = 4;
        cfg.batch_size = 8;
        cfg.distortion_pool = crate::distortions::default_pool();
        let a = train(&imgs, &cfg).unwrap();
        let b = train(&imgs, &cfg).unwrap();
        assert_eq!(a.watermark.to_bytes(), b.watermark.to_bytes());
        assert_eq!(a.log.len(), 4);
        let r = feasible_ball_radius(3, cfg.loss, 0.5);
        assert!(a.watermark.total_energy() <= r * r * (1.0 + 1e-9));
        cfg.map_kind = MapKind::Affine;
        cfg.features = FeatureSpec {
            kind: FeatureKind::IdentityDownsample,
            d_f: 4,
            seed: 0,
        };
        let c = train(&imgs, &cfg).unwrap();
        assert_eq!(c.maps[0].kind(), MapKind::Affine);
        assert_eq!(c.watermark.to_bytes(), train(&imgs, &cfg).unwrap().watermark.to_bytes());
    }

    #[test]
    fn thread_count_does_not_change_result() {
        let imgs = random_images(50, (1, 5, 5), 6);
        let mut cfg = TrainConfig::new(2, 10.0);
        cfg.epochs = 2;
        cfg.batch_size = 25;
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| train(&imgs, &cfg).unwrap());
        let b = four.install(|| train(&imgs, &cfg).unwrap());
        assert_eq!(a.watermark, b.watermark);
    }

    #[test]
    fn preconditioner_damps_only_leading_directions() {
        // Images along e0 with a little spread in e1; e2, e3 unused.
        let mut rng = SeededRng::new(4, 0);
        let data: Vec<ImageTensor> = (0..50)
            .map(|_| {
                let v = vec![10.0 + rng.standard_normal(), 0.1 * rng.standard_normal(), 0.0, 0.0];
                ImageTensor::from_raw((1, 1, 4), v, ValueRange::Unbounded)
            })
            .collect();
        let floor = data.iter().map(|x| norm_sq(x.data())).sum::<f64>() / 200.0;
        let pc = Preconditioner::fit(&data, 3, floor).unwrap();
        assert_eq!(pc.directions.len(), 1);
        let mut g = vec![1.0, 0.0, 1.0, -2.0];
        pc.apply(&mut g);
        let lambda = data.iter().map(|x| x.data()[0].powi(2)).sum::<f64>() / 50.0;
        assert!((g[0] - floor / lambda).abs() < 1e-3);
        assert_eq!(&g[2..], &[1.0, -2.0]);
        assert!(Preconditioner::fit(&data, 0, floor).is_none());
    }

    #[test]
    fn control_variate_is_zero_mean_over_messages() {
        let shape = (1, 4, 4);
        let images = random_images(6, shape, 11);
        let maps = sample_maps(3, 16, 0, 12);
        let dist = Distortion::GaussianNoise { sigma: 0.1 };
        let mut rng = SeededRng::new(13, 0);
        let draws = 4000;
        let mut sum = vec![0.0; 3 * 16];
        let mut single = 0.0;
        for t in 0..draws {
            let batch = Minibatch {
                images: images.iter().map(|x| x.data()).collect(),
                features: Vec::new(),
                messages: (0..6).map(|_| sample_uniform_message(3, &mut rng).unwrap()).collect(),
                distortion: &dist,
                streams: (0..6).map(|j| SeededRng::new(t, j)).collect(),
                shape,
                value_range: ValueRange::Unit,
            };
            let (_, _, slopes) = objective_parts(&maps, &batch, MarginLoss::Logistic, 0.1).unwrap();
            let cv = flat_params(&message_control_variate(&maps, &batch, &slopes).unwrap());
            single += norm_sq(&cv).sqrt();
            for (a, b) in sum.iter_mut().zip(&cv) {
                *a += b;
            }
        }
        let mean_norm = norm_sq(&sum).sqrt() / draws as f64;
        assert!(mean_norm < 0.05 * single / draws as f64, "{mean_norm}");
    }
}
