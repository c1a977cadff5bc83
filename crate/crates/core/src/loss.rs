//! Margin losses and the one-dimensional population curve.
//!
//! For a watermark vector of squared norm `r` that is orthogonal to the image
//! subspace, each bit's margin is `r + σ_ε √r Z`. The population loss per bit
//! is therefore `φ(r) = E V(r + σ_ε √r Z)` and the per-bit objective is
//! `h_pop(r) = φ(r) + β r`, minimized at `r★`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{normal_cdf, normal_pdf};
use crate::tensor::{dot, SeededRng};

/// Messages are enumerated exhaustively up to this many bits.
pub const EXHAUSTIVE_MAX_BITS: usize = 12;
/// Monte-Carlo messages per datum above [`EXHAUSTIVE_MAX_BITS`].
pub const MC_MESSAGES_PER_DATUM: usize = 256;
pub const DEFAULT_QUADRATURE_POINTS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginLoss {
    /// `(1 - t)_+`
    Hinge,
    /// `ln(1 + e^{-t})`
    Logistic,
}

impl MarginLoss {
    pub fn value(self, t: f64) -> f64 {
        match self {
            MarginLoss::Hinge => (1.0 - t).max(0.0),
            // softplus(-t) = max(-t, 0) + ln(1 + e^{-|t|})
            MarginLoss::Logistic => (-t).max(0.0) + (-t.abs()).exp().ln_1p(),
        }
    }

    /// An element of the subdifferential; always in `[-1, 0]`.
    pub fn subgradient(self, t: f64) -> f64 {
        match self {
            MarginLoss::Hinge => {
                if t <= 1.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            MarginLoss::Logistic => {
                if t >= 0.0 {
                    let e = (-t).exp();
                    -e / (1.0 + e)
                } else {
                    -1.0 / (1.0 + t.exp())
                }
            }
        }
    }

    pub fn at_zero(self) -> f64 {
        self.value(0.0)
    }

    pub fn infimum(self) -> f64 {
        0.0
    }

    pub fn lipschitz(self) -> f64 {
        1.0
    }

    pub fn name(self) -> &'static str {
        match self {
            MarginLoss::Hinge => "hinge",
            MarginLoss::Logistic => "logistic",
        }
    }
}

impl std::str::FromStr for MarginLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hinge" => Ok(MarginLoss::Hinge),
            "logistic" => Ok(MarginLoss::Logistic),
            other => Err(Error::param("loss", format!("unknown loss {other:?}"))),
        }
    }
}

/// Gauss–Hermite rule for the weight `e^{-x²}`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Golub–Welsch: eigen-decomposition of the Jacobi matrix.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let mut jacobi = nalgebra::DMatrix::<f64>::zeros(n, n);
        for i in 1..n {
            let off = (i as f64 / 2.0).sqrt();
            jacobi[(i, i - 1)] = off;
            jacobi[(i - 1, i)] = off;
        }
        let eig = jacobi.symmetric_eigen();
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let v0 = eig.eigenvectors[(0, i)];
                (eig.eigenvalues[i], std::f64::consts::PI.sqrt() * v0 * v0)
            })
            .collect();
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
        // symmetrize to remove eigen-solver asymmetry
        for i in 0..n / 2 {
            let j = n - 1 - i;
            let x = 0.5 * (pairs[i].0 - pairs[j].0);
            let w = 0.5 * (pairs[i].1 + pairs[j].1);
            pairs[i] = (x, w);
            pairs[j] = (-x, w);
        }
        if n % 2 == 1 {
            pairs[n / 2].0 = 0.0;
        }
        Self {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        }
    }

    /// Cached rule shared across threads.
    pub fn cached(n: usize) -> Arc<GaussHermite> {
        static CACHE: OnceLock<Mutex<HashMap<usize, Arc<GaussHermite>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().expect("quadrature cache poisoned");
        guard
            .entry(n)
            .or_insert_with(|| Arc::new(GaussHermite::new(n)))
            .clone()
    }

    /// `E f(Z)` for `Z ~ N(0, 1)`.
    pub fn expect_standard_normal(&self, f: impl Fn(f64) -> f64) -> f64 {
        let s2 = std::f64::consts::SQRT_2;
        let sum: f64 = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(s2 * x))
            .sum();
        sum / std::f64::consts::PI.sqrt()
    }
}

/// `(V, σ_ε, β)` defining `φ` and `h_pop`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationCurve {
    pub loss: MarginLoss,
    pub sigma_eps: f64,
    pub beta: f64,
}

/// Minimizer of `h_pop` and the minimum value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RStar {
    pub r_star: f64,
    pub h_min: f64,
}

impl PopulationCurve {
    pub fn new(loss: MarginLoss, sigma_eps: f64, beta: f64) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::param("beta", "must be positive"));
        }
        if !(sigma_eps >= 0.0) || !sigma_eps.is_finite() {
            return Err(Error::param("sigma_eps", "must be nonnegative"));
        }
        Ok(Self {
            loss,
            sigma_eps,
            beta,
        })
    }

    /// `φ(r) = E V(r + σ_ε √r Z)`.
    ///
    /// Hinge uses the exact Gaussian ramp expectation; logistic uses a
    /// `quadrature_points`-node Gauss–Hermite rule. Both return `V(r)` when
    /// `σ_ε √r = 0`.
    pub fn phi(&self, r: f64, quadrature_points: usize) -> f64 {
        let r = r.max(0.0);
        let spread = self.sigma_eps * r.sqrt();
        if spread == 0.0 {
            return self.loss.value(r);
        }
        match self.loss {
            MarginLoss::Hinge => {
                // E (c - s Z)_+ = c Φ(c/s) + s φ(c/s)
                let c = 1.0 - r;
                let u = c / spread;
                c * normal_cdf(u) + spread * normal_pdf(u)
            }
            MarginLoss::Logistic => GaussHermite::cached(quadrature_points)
                .expect_standard_normal(|z| self.loss.value(r + spread * z)),
        }
    }

    pub fn h_pop(&self, r: f64) -> f64 {
        self.phi(r, DEFAULT_QUADRATURE_POINTS) + self.beta * r
    }

    /// Checks the sufficient conditions for a unique positive minimizer.
    pub fn check_uniqueness_conditions(&self) -> Result<()> {
        let s2 = self.sigma_eps * self.sigma_eps;
        match self.loss {
            MarginLoss::Hinge => {
                if !(s2 < 4.0) {
                    return Err(Error::AssumptionViolated(format!(
                        "hinge requires sigma_eps^2 < 4, got {s2}"
                    )));
                }
                if !(self.beta < 1.0) {
                    return Err(Error::AssumptionViolated(format!(
                        "hinge requires beta < 1, got {}",
                        self.beta
                    )));
                }
            }
            MarginLoss::Logistic => {
                let s2_max = -4.0 + 2.0 * 6f64.sqrt();
                if !(s2 < s2_max) {
                    return Err(Error::AssumptionViolated(format!(
                        "logistic requires sigma_eps^2 < -4 + 2*sqrt(6) = {s2_max:.6}, got {s2}"
                    )));
                }
                let beta_max = 0.5 - s2 / 8.0;
                if !(self.beta < beta_max) {
                    return Err(Error::AssumptionViolated(format!(
                        "logistic requires beta < 1/2 - sigma_eps^2/8 = {beta_max:.6}, got {}",
                        self.beta
                    )));
                }
            }
        }
        Ok(())
    }

    /// Upper end of the search interval for `r★`.
    pub fn search_limit(&self) -> f64 {
        (4.0 / self.beta).max(20.0)
    }

    /// Coarse grid followed by golden-section refinement.
    pub fn solve_r_star(&self) -> Result<RStar> {
        self.check_uniqueness_conditions()?;
        let r_max = self.search_limit();
        const GRID: usize = 4000;
        let step = r_max / GRID as f64;
        let (best, _) = (0..=GRID)
            .map(|i| (i, self.h_pop(i as f64 * step)))
            .fold((0, f64::INFINITY), |acc, (i, h)| if h < acc.1 { (i, h) } else { acc });
        let mut lo = (best.saturating_sub(1)) as f64 * step;
        let mut hi = ((best + 1).min(GRID)) as f64 * step;

        let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
        let mut a = hi - inv_phi * (hi - lo);
        let mut b = lo + inv_phi * (hi - lo);
        let mut fa = self.h_pop(a);
        let mut fb = self.h_pop(b);
        while hi - lo > 1e-11 {
            if fa <= fb {
                hi = b;
                b = a;
                fb = fa;
                a = hi - inv_phi * (hi - lo);
                fa = self.h_pop(a);
            } else {
                lo = a;
                a = b;
                fa = fb;
                b = lo + inv_phi * (hi - lo);
                fb = self.h_pop(b);
            }
        }
        let r_star = 0.5 * (lo + hi);
        if r_star <= 1e-9 {
            return Err(Error::AssumptionViolated(
                "h_pop is minimized at r = 0 (no positive minimizer)".into(),
            ));
        }
        Ok(RStar {
            r_star,
            h_min: self.h_pop(r_star),
        })
    }
}

/// Free-function form of [`PopulationCurve::phi`].
pub fn phi(curve: &PopulationCurve, r: f64, quadrature_points: usize) -> f64 {
    curve.phi(r, quadrature_points)
}

/// Free-function form of [`PopulationCurve::solve_r_star`].
pub fn solve_r_star(curve: &PopulationCurve) -> Result<RStar> {
    curve.solve_r_star()
}

/// How the inner expectation over messages is evaluated.
#[derive(Debug, Clone)]
pub enum MessageSampling {
    /// Exhaustive for `K ≤ 12`, otherwise 256 Monte-Carlo messages per datum.
    Auto(SeededRng),
    Exhaustive,
    MonteCarlo { per_datum: usize, rng: SeededRng },
}

/// Finite-sample objective with the identity distortion:
/// `n⁻¹ Σ_i E_m Σ_k V(m_k ⟨w_k, x_i + Σ_j m_j w_j⟩) + β Σ_k ‖w_k‖²`.
pub fn objective_finite(
    watermark: &[Vec<f64>],
    data: &[Vec<f64>],
    loss: MarginLoss,
    beta: f64,
    sampling: MessageSampling,
) -> Result<f64> {
    let k = watermark.len();
    if k == 0 {
        return Err(Error::Empty("watermark"));
    }
    if data.is_empty() {
        return Err(Error::Empty("data"));
    }
    let dim = watermark[0].len();
    for v in watermark.iter().chain(data) {
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: v.len(),
            });
        }
    }
    let gram: Vec<f64> = (0..k * k)
        .map(|idx| dot(&watermark[idx / k], &watermark[idx % k]))
        .collect();

    let (exhaustive, per_datum, rng) = match sampling {
        MessageSampling::Auto(rng) => (k <= EXHAUSTIVE_MAX_BITS, MC_MESSAGES_PER_DATUM, Some(rng)),
        MessageSampling::Exhaustive => {
            if k > 24 {
                return Err(Error::param("K", "too many bits for exhaustive enumeration"));
            }
            (true, 0, None)
        }
        MessageSampling::MonteCarlo { per_datum, rng } => (false, per_datum.max(1), Some(rng)),
    };

    let per_datum_loss: Vec<f64> = data
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let a: Vec<f64> = watermark.iter().map(|w| dot(w, x)).collect();
            let mut m = vec![0.0; k];
            if exhaustive {
                let total = 1usize << k;
                let mut acc = 0.0;
                for code in 0..total {
                    for (j, mj) in m.iter_mut().enumerate() {
                        *mj = if code >> j & 1 == 1 { 1.0 } else { -1.0 };
                    }
                    acc += message_loss(loss, &a, &gram, &m);
                }
                acc / total as f64
            } else {
                let mut r = rng.as_ref().expect("rng present").derive(i as u64);
                let mut acc = 0.0;
                for _ in 0..per_datum {
                    for mj in m.iter_mut() {
                        *mj = if r.random::<bool>() { 1.0 } else { -1.0 };
                    }
                    acc += message_loss(loss, &a, &gram, &m);
                }
                acc / per_datum as f64
            }
        })
        .collect();

    let data_term = per_datum_loss.iter().sum::<f64>() / data.len() as f64;
    let penalty: f64 = (0..k).map(|j| gram[j * k + j]).sum::<f64>() * beta;
    Ok(data_term + penalty)
}

fn message_loss(loss: MarginLoss, a: &[f64], gram: &[f64], m: &[f64]) -> f64 {
    let k = a.len();
    (0..k)
        .map(|kk| {
            let cross: f64 = (0..k).map(|j| m[j] * gram[kk * k + j]).sum();
            loss.value(m[kk] * (a[kk] + cross))
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_values() {
        assert_eq!(MarginLoss::Hinge.value(0.0), 1.0);
        assert!((MarginLoss::Logistic.value(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(MarginLoss::Hinge.value(2.0), 0.0);
        let l50 = MarginLoss::Logistic.value(50.0);
        assert!(l50.is_finite() && l50 <= 1e-21 && l50 > 0.0);
        assert!((MarginLoss::Logistic.value(-50.0) - 50.0).abs() < 1e-12);
    }

    #[test]
    fn subgradients() {
        assert_eq!(MarginLoss::Hinge.subgradient(0.0), -1.0);
        assert_eq!(MarginLoss::Hinge.subgradient(1.0), -1.0);
        assert_eq!(MarginLoss::Hinge.subgradient(1.5), 0.0);
        assert!((MarginLoss::Logistic.subgradient(0.0) + 0.5).abs() < 1e-15);
        let h = 1e-5;
        for t in [-2.0, 0.0, 2.0] {
            let v = MarginLoss::Logistic;
            let fd = (v.value(t + h) - v.value(t - h)) / (2.0 * h);
            assert!((v.subgradient(t) - fd).abs() < 1e-6);
        }
        for t in [-800.0, -3.0, 0.3, 700.0] {
            for v in [MarginLoss::Hinge, MarginLoss::Logistic] {
                let g = v.subgradient(t);
                assert!((-1.0..=0.0).contains(&g));
            }
        }
    }

    #[test]
    fn gauss_hermite_moments() {
        for n in [1, 2, 5, 20, 200] {
            let gh = GaussHermite::new(n);
            let total: f64 = gh.weights.iter().sum();
            assert!((total - std::f64::consts::PI.sqrt()).abs() < 1e-12, "n={n}");
        }
        let gh = GaussHermite::new(200);
        assert!((gh.expect_standard_normal(|z| z * z) - 1.0).abs() < 1e-10);
        assert!((gh.expect_standard_normal(|z| z.powi(4)) - 3.0).abs() < 1e-9);
        assert!(gh.expect_standard_normal(|z| z.powi(3)).abs() < 1e-10);
    }

    #[test]
    fn phi_noiseless_matches_loss() {
        let c = PopulationCurve::new(MarginLoss::Hinge, 0.0, 0.1).unwrap();
        assert_eq!(c.phi(0.5, 200), 0.5);
        let c = PopulationCurve::new(MarginLoss::Logistic, 0.0, 0.1).unwrap();
        assert!((c.phi(1.0, 200) - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
        assert!((c.phi(1.0, 200) - 0.313_262).abs() < 1e-6);
    }

    #[test]
    fn r_star_closed_forms() {
        let c = PopulationCurve::new(MarginLoss::Hinge, 0.0, 0.5).unwrap();
        assert!((c.solve_r_star().unwrap().r_star - 1.0).abs() < 1e-6);
        let c = PopulationCurve::new(MarginLoss::Logistic, 0.0, 0.25).unwrap();
        assert!((c.solve_r_star().unwrap().r_star - 3f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn uniqueness_conditions_enforced() {
        let bad = [
            (MarginLoss::Hinge, 2.0, 0.1),
            (MarginLoss::Hinge, 0.3, 1.0),
            (MarginLoss::Logistic, 1.0, 0.1),
            (MarginLoss::Logistic, 0.5, 0.49),
        ];
        for (loss, s, b) in bad {
            let err = PopulationCurve::new(loss, s, b).unwrap().solve_r_star().unwrap_err();
            assert!(matches!(err, Error::AssumptionViolated(_)), "{err}");
        }
        let msg = PopulationCurve::new(MarginLoss::Hinge, 0.3, 1.5)
            .unwrap()
            .solve_r_star()
            .unwrap_err()
            .to_string();
        assert!(msg.contains("beta < 1"), "{msg}");
        assert!(PopulationCurve::new(MarginLoss::Hinge, 0.3, 0.0).is_err());
    }

    #[test]
    fn zero_watermark_objective() {
        let w = vec![vec![0.0; 4]; 3];
        let data = vec![vec![1.0, -2.0, 0.5, 3.0], vec![0.1, 0.2, 0.3, 0.4]];
        for loss in [MarginLoss::Hinge, MarginLoss::Logistic] {
            let v = objective_finite(&w, &data, loss, 0.7, MessageSampling::Exhaustive).unwrap();
            assert!((v - 3.0 * loss.at_zero()).abs() < 1e-12);
        }
    }

    #[test]
    fn single_bit_hand_expansion() {
        let w = vec![vec![0.6, 0.0, 0.0]];
        let x = vec![vec![0.0, 2.0, -1.0]];
        let beta = 0.3;
        let r = 0.36;
        let expected = MarginLoss::Hinge.value(r) + beta * r;
        let v = objective_finite(&w, &x, MarginLoss::Hinge, beta, MessageSampling::Exhaustive).unwrap();
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn auto_sampling_switches_to_monte_carlo() {
        let k = 13;
        let w: Vec<Vec<f64>> = (0..k)
            .map(|i| (0..k).map(|j| if i == j { 0.5 } else { 0.0 }).collect())
            .collect();
        let data = vec![vec![0.0; k]];
        let a = objective_finite(&w, &data, MarginLoss::Hinge, 0.1, MessageSampling::Auto(SeededRng::new(1, 0))).unwrap();
        // orthogonal watermark, zero image: every margin is exactly 0.25
        let expected = k as f64 * (0.75 + 0.1 * 0.25);
        assert!((a - expected).abs() < 1e-12);
    }
}
