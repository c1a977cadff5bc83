//! Perturbed low-dimensional Gaussian image model `X = B Z + ε`.
//!
//! `Z ~ N(0, Σ_Z)` lives in `R^d`, `ε ~ N(0, σ_ε² I_D)`, and the image
//! subspace `U` is the column space of `B`. The model is the ground truth for
//! every theory check in [`crate::eval`].

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::tensor::{ImageTensor, SeededRng, ValueRange};

const RANK_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct LowDimModel {
    basis: DMatrix<f64>,
    sigma_z: DMatrix<f64>,
    sigma_eps: f64,
    /// Orthonormal basis of `U` (D×d).
    q: DMatrix<f64>,
    /// Lower Cholesky factor of `Σ_Z`.
    chol: DMatrix<f64>,
}

/// One draw from the model, with its latent and noise parts.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSample {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub eps: Vec<f64>,
}

impl LowDimModel {
    pub fn new(basis: DMatrix<f64>, sigma_z: DMatrix<f64>, sigma_eps: f64) -> Result<Self> {
        let (dim, latent) = basis.shape();
        if latent == 0 || latent >= dim {
            return Err(Error::param(
                "B",
                format!("need 0 < d < D, got D={dim}, d={latent}"),
            ));
        }
        if sigma_z.shape() != (latent, latent) {
            return Err(Error::param(
                "sigma_Z",
                format!("expected {latent}x{latent}, got {:?}", sigma_z.shape()),
            ));
        }
        if !(sigma_eps >= 0.0) || !sigma_eps.is_finite() {
            return Err(Error::param("sigma_eps", "must be finite and nonnegative"));
        }

        let sv = basis.clone().singular_values();
        let smax = sv.max();
        let smin = sv.min();
        if !(smin > RANK_TOL * smax) {
            return Err(Error::param(
                "B",
                format!("not full column rank (singular values {smin:e} / {smax:e})"),
            ));
        }

        let asym = (&sigma_z - sigma_z.transpose()).amax();
        if asym > 1e-12 * sigma_z.amax().max(1.0) {
            return Err(Error::param("sigma_Z", "not symmetric"));
        }
        let min_eig = sigma_z.clone().symmetric_eigenvalues().min();
        if !(min_eig > 0.0) {
            return Err(Error::param(
                "sigma_Z",
                format!("not positive definite (min eigenvalue {min_eig:e})"),
            ));
        }
        let chol = sigma_z
            .clone()
            .cholesky()
            .ok_or_else(|| Error::param("sigma_Z", "Cholesky factorization failed"))?
            .l();

        // column-pivoted QR; Q spans U regardless of the pivot order
        let qr = basis.clone().col_piv_qr();
        let q = qr.q().columns(0, latent).into_owned();

        Ok(Self {
            basis,
            sigma_z,
            sigma_eps,
            q,
            chol,
        })
    }

    /// Harness model: `B` Gaussian then orthonormalized, `Σ_Z = scale·I_d`.
    pub fn random_orthonormal(
        dim: usize,
        latent: usize,
        sigma_z_scale: f64,
        sigma_eps: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if latent == 0 || latent >= dim {
            return Err(Error::param("d", format!("need 0 < d < D, got d={latent}, D={dim}")));
        }
        let g = DMatrix::from_fn(dim, latent, |_, _| rng.standard_normal());
        let q = g.qr().q().columns(0, latent).into_owned();
        Self::new(
            q,
            DMatrix::identity(latent, latent) * sigma_z_scale,
            sigma_eps,
        )
    }

    /// `D=128, d=8, Σ_Z = 4 I, σ_ε = 0.3`.
    pub fn harness_default(rng: &mut SeededRng) -> Self {
        Self::random_orthonormal(128, 8, 4.0, 0.3, rng).expect("valid harness model")
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn sigma_z(&self) -> &DMatrix<f64> {
        &self.sigma_z
    }

    pub fn sigma_eps(&self) -> f64 {
        self.sigma_eps
    }

    pub fn orthonormal_basis(&self) -> &DMatrix<f64> {
        &self.q
    }

    /// `d < D - K` must hold for a `K`-bit watermark.
    pub fn supports_bits(&self, k: usize) -> bool {
        self.latent_dim() + k < self.dim()
    }

    pub fn sample_one(&self, rng: &mut SeededRng) -> ModelSample {
        let d = self.latent_dim();
        let g = DVector::from_fn(d, |_, _| rng.standard_normal());
        let z = &self.chol * g;
        let eps: Vec<f64> = (0..self.dim())
            .map(|_| self.sigma_eps * rng.standard_normal())
            .collect();
        let bz = &self.basis * &z;
        let x = bz.iter().zip(&eps).map(|(a, e)| a + e).collect();
        ModelSample {
            x,
            z: z.as_slice().to_vec(),
            eps,
        }
    }

    pub fn sample(&self, n: usize, rng: &mut SeededRng) -> Result<Vec<ModelSample>> {
        if n == 0 {
            return Err(Error::param("n", "must be at least 1"));
        }
        Ok((0..n).map(|_| self.sample_one(rng)).collect())
    }

    /// Samples only the images, as `1×1×D` unbounded tensors.
    pub fn sample_images(&self, n: usize, rng: &mut SeededRng) -> Result<Vec<ImageTensor>> {
        Ok(self
            .sample(n, rng)?
            .into_iter()
            .map(|s| ImageTensor::from_raw((1, 1, s.x.len()), s.x, ValueRange::Unbounded))
            .collect())
    }

    fn check_len(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: v.len(),
            });
        }
        Ok(())
    }

    /// `Π_U v`.
    pub fn project_onto_u(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_len(v)?;
        let v = DVector::from_column_slice(v);
        let coeffs = self.q.tr_mul(&v);
        Ok((&self.q * coeffs).as_slice().to_vec())
    }

    /// `Π_{U⊥} v = v - Π_U v`.
    pub fn project_onto_u_perp(&self, v: &[f64]) -> Result<Vec<f64>> {
        let pu = self.project_onto_u(v)?;
        Ok(v.iter().zip(&pu).map(|(a, b)| a - b).collect())
    }

    /// `Σ_X = B Σ_Z Bᵀ + σ_ε² I_D`.
    pub fn covariance_sigma_x(&self) -> DMatrix<f64> {
        let mut cov = &self.basis * &self.sigma_z * self.basis.transpose();
        let s2 = self.sigma_eps * self.sigma_eps;
        for i in 0..self.dim() {
            cov[(i, i)] += s2;
        }
        // symmetrize away rounding asymmetry
        (&cov + cov.transpose()) * 0.5
    }

    /// `tr(Σ_X)` without forming the D×D matrix.
    pub fn trace_sigma_x(&self) -> f64 {
        let btb = self.basis.tr_mul(&self.basis);
        (btb * &self.sigma_z).trace() + self.dim() as f64 * self.sigma_eps * self.sigma_eps
    }

    /// `uᵀ Σ_X v` without forming `Σ_X`.
    pub fn quad_form(&self, u: &[f64], v: &[f64]) -> f64 {
        let bu = self.basis.tr_mul(&DVector::from_column_slice(u));
        let bv = self.basis.tr_mul(&DVector::from_column_slice(v));
        let latent = bu.dot(&(&self.sigma_z * bv));
        let uv: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
        latent + self.sigma_eps * self.sigma_eps * uv
    }

    /// Writes a JSON sidecar at `path` plus `<stem>.B.addt` and `<stem>.sigma_z.addt`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("model")
            .to_string();
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let b_name = format!("{stem}.B.addt");
        let s_name = format!("{stem}.sigma_z.addt");
        io::write_tensor(&dir.join(&b_name), &matrix_tensor(&self.basis))?;
        io::write_tensor(&dir.join(&s_name), &matrix_tensor(&self.sigma_z))?;
        let header = ModelHeader {
            dim: self.dim(),
            latent_dim: self.latent_dim(),
            sigma_eps: self.sigma_eps,
            basis_file: b_name,
            sigma_z_file: s_name,
        };
        let text = serde_json::to_string_pretty(&header)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let header: ModelHeader = serde_json::from_str(&text)?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let basis = tensor_matrix(&io::read_tensor(&dir.join(&header.basis_file))?);
        let sigma_z = tensor_matrix(&io::read_tensor(&dir.join(&header.sigma_z_file))?);
        if basis.shape() != (header.dim, header.latent_dim) {
            return Err(Error::Format {
                what: "model sidecar",
                reason: format!(
                    "B is {:?}, header says {}x{}",
                    basis.shape(),
                    header.dim,
                    header.latent_dim
                ),
            });
        }
        // f32 storage loses exact symmetry
        let sigma_z = (&sigma_z + sigma_z.transpose()) * 0.5;
        Self::new(basis, sigma_z, header.sigma_eps)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    #[serde(rename = "D")]
    dim: usize,
    #[serde(rename = "d")]
    latent_dim: usize,
    sigma_eps: f64,
    basis_file: String,
    sigma_z_file: String,
}

fn matrix_tensor(m: &DMatrix<f64>) -> ImageTensor {
    let (r, c) = m.shape();
    let data = (0..r)
        .flat_map(|i| (0..c).map(move |j| (i, j)))
        .map(|(i, j)| m[(i, j)])
        .collect();
    ImageTensor::from_raw((1, r, c), data, ValueRange::Unbounded)
}

fn tensor_matrix(t: &ImageTensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.height(), t.width(), t.data())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(sigma_eps: f64, seed: u64) -> LowDimModel {
        LowDimModel::random_orthonormal(32, 4, 4.0, sigma_eps, &mut SeededRng::new(seed, 0))
            .unwrap()
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    #[test]
    fn noiseless_samples_live_in_u() {
        let m = model(0.0, 1);
        let mut rng = SeededRng::new(2, 0);
        for s in m.sample(50, &mut rng).unwrap() {
            let perp = m.project_onto_u_perp(&s.x).unwrap();
            assert!(norm(&perp) <= 1e-9 * norm(&s.x));
        }
    }

    #[test]
    fn construction_identity_and_replay() {
        let m = model(0.3, 3);
        let a = m.sample(10, &mut SeededRng::new(4, 0)).unwrap();
        let b = m.sample(10, &mut SeededRng::new(4, 0)).unwrap();
        assert_eq!(a, b);
        for s in &a {
            let bz = m.basis() * DVector::from_column_slice(&s.z);
            for i in 0..m.dim() {
                assert_eq!(s.x[i], bz[i] + s.eps[i]);
            }
        }
        assert!(m.sample(0, &mut SeededRng::new(4, 0)).is_err());
    }

    #[test]
    fn projector_properties() {
        let m = model(0.3, 5);
        let mut rng = SeededRng::new(6, 0);
        let in_u: Vec<f64> = m.basis().column(0).iter().copied().collect();
        let p = m.project_onto_u(&in_u).unwrap();
        for (a, b) in p.iter().zip(&in_u) {
            assert!((a - b).abs() < 1e-10);
        }
        for _ in 0..20 {
            let v: Vec<f64> = (0..32).map(|_| rng.standard_normal()).collect();
            let pu = m.project_onto_u(&v).unwrap();
            let pp = m.project_onto_u_perp(&v).unwrap();
            let ppu = m.project_onto_u(&pu).unwrap();
            for i in 0..32 {
                assert!((pu[i] + pp[i] - v[i]).abs() < 1e-10);
                assert!((ppu[i] - pu[i]).abs() < 1e-10);
            }
            let lhs = norm(&pu).powi(2) + norm(&pp).powi(2);
            assert!((lhs - norm(&v).powi(2)).abs() <= 1e-9 * norm(&v).powi(2));
            // the perpendicular part has no U component
            assert!(norm(&m.project_onto_u(&pp).unwrap()) <= 1e-10 * norm(&pp).max(1.0));
        }
        assert!(m.project_onto_u(&[1.0; 3]).is_err());
    }

    #[test]
    fn sigma_x_closed_form() {
        let mut b = DMatrix::zeros(6, 1);
        b[(0, 0)] = 1.0;
        let m = LowDimModel::new(b, DMatrix::from_element(1, 1, 4.0), 1.0).unwrap();
        let cov = m.covariance_sigma_x();
        let mut expected = DMatrix::identity(6, 6);
        expected[(0, 0)] = 5.0;
        assert!((cov - expected).amax() < 1e-15);
    }

    #[test]
    fn sigma_x_noiseless_is_projector() {
        let m = LowDimModel::random_orthonormal(10, 3, 1.0, 0.0, &mut SeededRng::new(8, 0)).unwrap();
        let cov = m.covariance_sigma_x();
        let q = m.orthonormal_basis();
        assert!((cov - q * q.transpose()).amax() < 1e-12);
    }

    #[test]
    fn trace_linearity() {
        let m = model(0.3, 9);
        let cov = m.covariance_sigma_x();
        let btb = m.basis() * m.sigma_z() * m.basis().transpose();
        assert!((cov.trace() - (btb.trace() + 32.0 * 0.09)).abs() < 1e-10);
        assert!((m.trace_sigma_x() - cov.trace()).abs() < 1e-10);
    }

    #[test]
    fn rejects_rank_deficient_and_indefinite() {
        let b = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert!(LowDimModel::new(b, DMatrix::identity(2, 2), 0.1).is_err());
        let b = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(LowDimModel::new(b.clone(), bad, 0.1).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(LowDimModel::new(b, asym, 0.1).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = model(0.3, 10);
        let path = dir.path().join("model.json");
        m.save(&path).unwrap();
        let back = LowDimModel::load(&path).unwrap();
        assert_eq!(back.dim(), 32);
        assert_eq!(back.sigma_eps(), 0.3);
        assert!((back.basis() - m.basis()).amax() < 1e-6);
    }
}
