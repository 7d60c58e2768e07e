//! Gaussians whose covariance is `ΛΛᵀ + Ψ`, with `Λ` a tall `D x K` factor and
//! `Ψ` a positive diagonal stored as a vector.
//!
//! Every operation here costs `O(D K^2 + K^3)` or less: solves go through the
//! Woodbury identity and determinants through the matrix-determinant lemma, so
//! no `D x D` matrix is ever formed (the `to_dense` helpers exist for tests and
//! small-dimensional reporting only).
//!
//! # Randomness
//!
//! Sampling takes any [`rand::Rng`]. Draws are consumed in a fixed order: for
//! each sample, `K` standard normals for the latent factor `ζ`, then `D`
//! standard normals for the diagonal noise `ε`, using the ziggurat sampler of
//! [`rand_distr::StandardNormal`]. With a seeded generator (the harness uses
//! ChaCha8 seeded through `seed_from_u64`) the output is bit-reproducible.
//!
//! # Binary format
//!
//! [`GaussianLrd::to_bytes`] writes the 8-byte magic `PBAMGLRD`, then `D` and
//! `K` as little-endian `u64`, then `μ` (D values), `Λ` in column-major order
//! (D*K values) and `Ψ` (D values), all as little-endian `f64`.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;

/// Smallest admissible diagonal entry.
pub const PSI_FLOOR: f64 = 1e-10;

const MAGIC: &[u8; 8] = b"PBAMGLRD";

/// Cached Woodbury factorization of `ΛΛᵀ + Ψ`.
///
/// Holds `Ψ⁻¹`, `Ψ⁻¹Λ` and the Cholesky factor of the capacitance matrix
/// `I + ΛᵀΨ⁻¹Λ`. It accepts factors with more columns than rows, which the
/// match step needs for `Ψ_t + RRᵀ`.
#[derive(Clone, Debug)]
pub struct Capacitance {
    psi_inv: DVector<f64>,
    psi_inv_lambda: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    logdet: f64,
}

impl Capacitance {
    pub fn new(lambda: &DMatrix<f64>, psi: &DVector<f64>) -> Result<Self> {
        if lambda.nrows() != psi.len() {
            return Err(Error::Dimension {
                what: "low-rank factor rows",
                expected: psi.len(),
                found: lambda.nrows(),
            });
        }
        let psi_inv = psi.map(|p| 1.0 / p);
        let psi_inv_lambda = linalg::scale_rows(lambda, &psi_inv);
        let mut cap = lambda.tr_mul(&psi_inv_lambda);
        for i in 0..cap.nrows() {
            cap[(i, i)] += 1.0;
        }
        let chol = linalg::cholesky(&cap, "Woodbury capacitance I + ΛᵀΨ⁻¹Λ")?;
        let logdet = psi.iter().map(|p| p.ln()).sum::<f64>() + linalg::chol_logdet(&chol);
        Ok(Self {
            psi_inv,
            psi_inv_lambda,
            chol,
            logdet,
        })
    }

    pub fn dim(&self) -> usize {
        self.psi_inv.len()
    }

    /// `(ΛΛᵀ + Ψ)⁻¹ Y` as `Ψ⁻¹Y − Ψ⁻¹Λ (I + ΛᵀΨ⁻¹Λ)⁻¹ ΛᵀΨ⁻¹Y`.
    pub fn solve(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if y.nrows() != self.dim() {
            return Err(Error::Dimension {
                what: "right-hand side rows",
                expected: self.dim(),
                found: y.nrows(),
            });
        }
        let inner = self.chol.solve(&self.psi_inv_lambda.tr_mul(y));
        let mut out = linalg::scale_rows(y, &self.psi_inv);
        out.gemm(-1.0, &self.psi_inv_lambda, &inner, 1.0);
        Ok(out)
    }

    pub fn solve_vec(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        let m = DMatrix::from_column_slice(y.len(), 1, y.as_slice());
        Ok(self.solve(&m)?.column(0).into_owned())
    }

    /// `log |ΛΛᵀ + Ψ|` by the matrix-determinant lemma.
    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    /// Diagonal of `(ΛΛᵀ + Ψ)⁻¹` in `O(D K^2)`.
    pub fn inverse_diagonal(&self) -> DVector<f64> {
        // Ψ⁻¹Λ C⁻¹ ΛᵀΨ⁻¹ = W Wᵀ with Wᵀ = L⁻¹ (Ψ⁻¹Λ)ᵀ.
        let wt = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&self.psi_inv_lambda.transpose())
            .expect("Cholesky factor has a positive diagonal");
        let mut diag = self.psi_inv.clone();
        for (j, col) in wt.column_iter().enumerate() {
            diag[j] -= col.norm_squared();
        }
        diag
    }

    /// `Λᵀ(ΛΛᵀ + Ψ)⁻¹`, evaluated as `(I + ΛᵀΨ⁻¹Λ)⁻¹ ΛᵀΨ⁻¹`.
    pub fn lambda_t_inverse(&self) -> DMatrix<f64> {
        self.chol.solve(&self.psi_inv_lambda.transpose())
    }
}

/// Covariance `ΛΛᵀ + Ψ` with `K ≤ D` and every `ψᵢ ≥ PSI_FLOOR`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankDiag {
    lambda: DMatrix<f64>,
    psi: DVector<f64>,
}

impl LowRankDiag {
    pub fn new(lambda: DMatrix<f64>, psi: DVector<f64>) -> Result<Self> {
        let d = psi.len();
        if d == 0 {
            return Err(Error::InvalidParameter("dimension must be positive".into()));
        }
        if lambda.nrows() != d {
            return Err(Error::Dimension {
                what: "low-rank factor rows",
                expected: d,
                found: lambda.nrows(),
            });
        }
        if lambda.ncols() > d {
            return Err(Error::InvalidParameter(format!(
                "rank {} exceeds dimension {d}",
                lambda.ncols()
            )));
        }
        if let Some((i, p)) = psi
            .iter()
            .enumerate()
            .find(|(_, p)| !(p.is_finite() && **p >= PSI_FLOOR))
        {
            return Err(Error::InvalidParameter(format!(
                "diagonal entry {i} is {p:e}, below the floor {PSI_FLOOR:e} or not finite"
            )));
        }
        if lambda.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("low-rank factor has non-finite entries".into()));
        }
        Ok(Self { lambda, psi })
    }

    pub fn diagonal(psi: DVector<f64>) -> Result<Self> {
        let d = psi.len();
        Self::new(DMatrix::zeros(d, 0), psi)
    }

    pub fn identity(d: usize) -> Self {
        Self {
            lambda: DMatrix::zeros(d, 0),
            psi: DVector::from_element(d, 1.0),
        }
    }

    pub fn dim(&self) -> usize {
        self.psi.len()
    }

    pub fn rank(&self) -> usize {
        self.lambda.ncols()
    }

    pub fn lambda(&self) -> &DMatrix<f64> {
        &self.lambda
    }

    pub fn psi(&self) -> &DVector<f64> {
        &self.psi
    }

    pub fn into_parts(self) -> (DMatrix<f64>, DVector<f64>) {
        (self.lambda, self.psi)
    }

    pub fn capacitance(&self) -> Result<Capacitance> {
        Capacitance::new(&self.lambda, &self.psi)
    }

    /// `(ΛΛᵀ + Ψ) X`, factor-wise.
    pub fn mul(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = linalg::scale_rows(x, &self.psi);
        out.gemm(1.0, &self.lambda, &self.lambda.tr_mul(x), 1.0);
        out
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        self.psi.component_mul(x) + &self.lambda * self.lambda.tr_mul(x)
    }

    /// `(ΛΛᵀ + Ψ)⁻¹ Y` without forming any `D x D` matrix.
    pub fn solve(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.capacitance()?.solve(y)
    }

    pub fn logdet(&self) -> Result<f64> {
        Ok(self.capacitance()?.logdet())
    }

    /// Diagonal of `ΛΛᵀ + Ψ`.
    pub fn variances(&self) -> DVector<f64> {
        &self.psi + linalg::row_sq_norms(&self.lambda)
    }

    pub fn trace(&self) -> f64 {
        self.psi.sum() + self.lambda.norm_squared()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = &self.lambda * self.lambda.transpose();
        for i in 0..self.dim() {
            m[(i, i)] += self.psi[i];
        }
        m
    }
}

/// Multivariate normal `N(μ, ΛΛᵀ + Ψ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianLrd {
    mu: DVector<f64>,
    cov: LowRankDiag,
}

/// Standard-normal draws behind a batch of samples, kept so reparameterized
/// gradients can reuse them.
#[derive(Clone, Debug)]
pub struct NoiseDraw {
    /// `K x n` latent factor draws.
    pub zeta: DMatrix<f64>,
    /// `D x n` diagonal noise draws.
    pub eps: DMatrix<f64>,
}

impl GaussianLrd {
    pub fn new(mu: DVector<f64>, lambda: DMatrix<f64>, psi: DVector<f64>) -> Result<Self> {
        let cov = LowRankDiag::new(lambda, psi)?;
        Self::from_cov(mu, cov)
    }

    pub fn from_cov(mu: DVector<f64>, cov: LowRankDiag) -> Result<Self> {
        if mu.len() != cov.dim() {
            return Err(Error::Dimension {
                what: "mean length",
                expected: cov.dim(),
                found: mu.len(),
            });
        }
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("mean has non-finite entries".into()));
        }
        Ok(Self { mu, cov })
    }

    pub fn standard(d: usize) -> Self {
        Self {
            mu: DVector::zeros(d),
            cov: LowRankDiag::identity(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.cov.dim()
    }

    pub fn rank(&self) -> usize {
        self.cov.rank()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn cov(&self) -> &LowRankDiag {
        &self.cov
    }

    pub fn lambda(&self) -> &DMatrix<f64> {
        self.cov.lambda()
    }

    pub fn psi(&self) -> &DVector<f64> {
        self.cov.psi()
    }

    pub fn into_parts(self) -> (DVector<f64>, LowRankDiag) {
        (self.mu, self.cov)
    }

    /// Draws the standard normals for `n` samples in the documented order.
    pub fn draw_noise<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> NoiseDraw {
        let (d, k) = (self.dim(), self.rank());
        let mut zeta = DMatrix::zeros(k, n);
        let mut eps = DMatrix::zeros(d, n);
        for b in 0..n {
            for v in zeta.column_mut(b).iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            for v in eps.column_mut(b).iter_mut() {
                *v = rng.sample(StandardNormal);
            }
        }
        NoiseDraw { zeta, eps }
    }

    /// Maps noise to samples, `z = μ + Λζ + √Ψ ε`, one sample per column.
    pub fn transform(&self, noise: &NoiseDraw) -> DMatrix<f64> {
        let scale = self.cov.psi.map(f64::sqrt);
        let mut z = linalg::scale_rows(&noise.eps, &scale);
        z.gemm(1.0, &self.cov.lambda, &noise.zeta, 1.0);
        for mut col in z.column_iter_mut() {
            col += &self.mu;
        }
        z
    }

    /// `n` samples as the columns of a `D x n` matrix.
    pub fn sample_columns<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> DMatrix<f64> {
        let noise = self.draw_noise(n, rng);
        self.transform(&noise)
    }

    /// `n` samples as the rows of an `n x D` matrix.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> DMatrix<f64> {
        self.sample_columns(n, rng).transpose()
    }

    pub fn logdet(&self) -> Result<f64> {
        self.cov.logdet()
    }

    pub fn logpdf(&self, z: &DVector<f64>) -> Result<f64> {
        let zs = DMatrix::from_column_slice(z.len(), 1, z.as_slice());
        Ok(self.logpdf_columns(&zs)?[0])
    }

    /// Log-density of every column of `zs`.
    pub fn logpdf_columns(&self, zs: &DMatrix<f64>) -> Result<DVector<f64>> {
        let cap = self.cov.capacitance()?;
        let mut centered = zs.clone();
        for mut col in centered.column_iter_mut() {
            col -= &self.mu;
        }
        let solved = cap.solve(&centered)?;
        let norm = self.dim() as f64 * (2.0 * PI).ln() + cap.logdet();
        Ok(DVector::from_iterator(
            zs.ncols(),
            centered
                .column_iter()
                .zip(solved.column_iter())
                .map(|(c, s)| -0.5 * (norm + c.dot(&s))),
        ))
    }

    /// Score `∇ log q(z) = −Σ⁻¹(z − μ)` of every column.
    pub fn score_columns(&self, zs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut centered = zs.clone();
        for mut col in centered.column_iter_mut() {
            col -= &self.mu;
        }
        Ok(-self.cov.solve(&centered)?)
    }

    pub fn entropy(&self) -> Result<f64> {
        let d = self.dim() as f64;
        Ok(0.5 * (d * (2.0 * PI * std::f64::consts::E).ln() + self.logdet()?))
    }

    /// Closed-form `KL(self ‖ other)`.
    pub fn kl(&self, other: &GaussianLrd) -> Result<f64> {
        gauss_kl(self, other)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (d, k) = (self.dim(), self.rank());
        let mut out = Vec::with_capacity(24 + 8 * (2 * d + d * k));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(d as u64).to_le_bytes());
        out.extend_from_slice(&(k as u64).to_le_bytes());
        let values = self.mu.iter().chain(self.cov.lambda.iter()).chain(self.cov.psi.iter());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 24 || &bytes[..8] != MAGIC {
            return Err(Error::Format("missing PBAMGLRD header".into()));
        }
        let read_u64 = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        let (d, k) = (read_u64(8), read_u64(16));
        let expected = d
            .checked_mul(k)
            .and_then(|dk| dk.checked_add(d.checked_mul(2)?))
            .and_then(|n| n.checked_mul(8))
            .and_then(|n| n.checked_add(24))
            .ok_or_else(|| Error::Format(format!("header sizes D={d}, K={k} overflow")))?;
        if bytes.len() as u64 != expected {
            return Err(Error::Format(format!(
                "expected {expected} bytes for D={d}, K={k}, found {}",
                bytes.len()
            )));
        }
        let (d, k) = (d as usize, k as usize);
        let mut values = bytes[24..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mu = DVector::from_iterator(d, values.by_ref().take(d));
        let lambda = DMatrix::from_iterator(d, k, values.by_ref().take(d * k));
        let psi = DVector::from_iterator(d, values.by_ref().take(d));
        Self::new(mu, lambda, psi)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Closed-form `KL(qa ‖ qb)` between two low-rank-plus-diagonal Gaussians.
///
/// The trace term splits as `Σᵢ ψ_{a,i} (Σ_b⁻¹)ᵢᵢ + tr(Λ_aᵀ Σ_b⁻¹ Λ_a)`, so the
/// cost is `O(D (K_a + K_b)^2 + K_b^3)`.
pub fn gauss_kl(qa: &GaussianLrd, qb: &GaussianLrd) -> Result<f64> {
    if qa.dim() != qb.dim() {
        return Err(Error::Dimension {
            what: "KL operands",
            expected: qa.dim(),
            found: qb.dim(),
        });
    }
    let cap_b = qb.cov.capacitance()?;
    let logdet_a = qa.cov.logdet()?;
    let diag_term = cap_b.inverse_diagonal().dot(&qa.cov.psi);
    let lowrank_term = linalg::frobenius_dot(&qa.cov.lambda, &cap_b.solve(&qa.cov.lambda)?);
    let delta = &qa.mu - &qb.mu;
    let maha = delta.dot(&cap_b.solve_vec(&delta)?);
    let d = qa.dim() as f64;
    Ok(0.5 * (cap_b.logdet() - logdet_a - d + diag_term + lowrank_term + maha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_lrd(d: usize, k: usize, rng: &mut ChaCha8Rng) -> GaussianLrd {
        let mu = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let lambda = DMatrix::from_fn(d, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let psi = DVector::from_fn(d, |_, _| rng.random_range(0.2..2.0));
        GaussianLrd::new(mu, lambda, psi).unwrap()
    }

    fn dense_logpdf(mu: &DVector<f64>, sigma: &DMatrix<f64>, z: &DVector<f64>) -> f64 {
        let chol = sigma.clone().cholesky().unwrap();
        let diff = z - mu;
        let sol = chol.solve(&diff);
        let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * (mu.len() as f64 * (2.0 * PI).ln() + logdet + diff.dot(&sol))
    }

    fn dense_kl(qa: &GaussianLrd, qb: &GaussianLrd) -> f64 {
        let sa = qa.cov().to_dense();
        let sb = qb.cov().to_dense();
        let sb_inv = sb.clone().try_inverse().unwrap();
        let delta = qa.mu() - qb.mu();
        0.5 * (sb.determinant().ln() - sa.determinant().ln() - qa.dim() as f64
            + (&sb_inv * &sa).trace()
            + delta.dot(&(&sb_inv * &delta)))
    }

    #[test]
    fn construction_rejects_bad_parameters() {
        let d = 3;
        let ok = LowRankDiag::new(DMatrix::zeros(d, 1), DVector::from_element(d, 1.0));
        assert!(ok.is_ok());
        assert!(LowRankDiag::new(DMatrix::zeros(d, 4), DVector::from_element(d, 1.0)).is_err());
        assert!(LowRankDiag::new(DMatrix::zeros(d, 1), DVector::from_element(d, 1e-12)).is_err());
        assert!(LowRankDiag::new(DMatrix::zeros(2, 1), DVector::from_element(d, 1.0)).is_err());
        let mut psi = DVector::from_element(d, 1.0);
        psi[1] = f64::NAN;
        assert!(LowRankDiag::new(DMatrix::zeros(d, 1), psi).is_err());
    }

    #[test]
    fn diagonal_solve_divides_rows() {
        let psi = DVector::from_vec(vec![2.0, 4.0, 0.5]);
        let cov = LowRankDiag::diagonal(psi.clone()).unwrap();
        let y = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let x = cov.solve(&y).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert_eq!(x[(i, j)], y[(i, j)] / psi[i]);
            }
        }
    }

    #[test]
    fn woodbury_matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_lrd(4, 2, &mut rng);
        let y = DMatrix::from_fn(4, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let dense = q.cov().to_dense().try_inverse().unwrap() * &y;
        let fast = q.cov().solve(&y).unwrap();
        assert!((&fast - &dense).norm() <= 1e-10 * dense.norm());
    }

    #[test]
    fn woodbury_inverts_forward_multiply() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random_lrd(9, 3, &mut rng);
        let x = DMatrix::from_fn(9, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = q.cov().mul(&x);
        let back = q.cov().solve(&y).unwrap();
        assert!((&back - &x).amax() < 1e-8);
    }

    #[test]
    fn logdet_cases() {
        assert_eq!(LowRankDiag::identity(4).logdet().unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_lrd(5, 2, &mut rng);
        let dense = q.cov().to_dense().determinant().ln();
        assert!((q.logdet().unwrap() - dense).abs() < 1e-10);

        let c: f64 = 3.5;
        let scaled = LowRankDiag::new(q.lambda() * c.sqrt(), q.psi() * c).unwrap();
        let expected = q.logdet().unwrap() + 5.0 * c.ln();
        assert!((scaled.logdet().unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn logpdf_cases() {
        let q = GaussianLrd::standard(2);
        let v = q.logpdf(&DVector::zeros(2)).unwrap();
        assert!((v + (2.0 * PI).ln()).abs() < 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random_lrd(4, 1, &mut rng);
        let z = DVector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let dense = dense_logpdf(q.mu(), &q.cov().to_dense(), &z);
        assert!((q.logpdf(&z).unwrap() - dense).abs() < 1e-9);

        let mode = q.logpdf(q.mu()).unwrap();
        let expected = -0.5 * (4.0 * (2.0 * PI).ln() + q.logdet().unwrap());
        assert!((mode - expected).abs() < 1e-12);
    }

    #[test]
    fn kl_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let qa = random_lrd(3, 2, &mut rng);
        assert!(gauss_kl(&qa, &qa).unwrap().abs() < 1e-10);

        let qb = random_lrd(3, 1, &mut rng);
        assert!((gauss_kl(&qa, &qb).unwrap() - dense_kl(&qa, &qb)).abs() < 1e-9);

        let mut e1 = DVector::zeros(3);
        e1[0] = 1.0;
        let shifted = GaussianLrd::from_cov(e1, LowRankDiag::identity(3)).unwrap();
        let kl = gauss_kl(&shifted, &GaussianLrd::standard(3)).unwrap();
        assert!((kl - 0.5).abs() < 1e-14);

        assert!(gauss_kl(&qa, &GaussianLrd::standard(4)).is_err());
    }

    #[test]
    fn entropy_cases() {
        let h = GaussianLrd::standard(1).entropy().unwrap();
        assert!((h - 0.5 * (2.0 * PI * std::f64::consts::E).ln()).abs() < 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = random_lrd(4, 2, &mut rng);
        let dense = 0.5 * (4.0 * (2.0 * PI * std::f64::consts::E).ln() + q.cov().to_dense().determinant().ln());
        assert!((q.entropy().unwrap() - dense).abs() < 1e-10);

        let psi = DVector::from_vec(vec![0.3, 1.7, 2.2]);
        let diag = GaussianLrd::from_cov(DVector::zeros(3), LowRankDiag::diagonal(psi.clone()).unwrap()).unwrap();
        let expected: f64 = psi
            .iter()
            .map(|p| 0.5 * (2.0 * PI * std::f64::consts::E * p).ln())
            .sum();
        assert!((diag.entropy().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn inverse_diagonal_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = random_lrd(6, 3, &mut rng);
        let dense = q.cov().to_dense().try_inverse().unwrap();
        let fast = q.cov().capacitance().unwrap().inverse_diagonal();
        for i in 0..6 {
            assert!((fast[i] - dense[(i, i)]).abs() < 1e-10);
        }
    }

    #[test]
    fn sampling_is_reproducible_per_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = random_lrd(5, 2, &mut rng);
        let a = q.sample(7, &mut ChaCha8Rng::seed_from_u64(99));
        let b = q.sample(7, &mut ChaCha8Rng::seed_from_u64(99));
        assert_eq!(a, b);
        assert_eq!(a.shape(), (7, 5));
    }

    #[test]
    fn byte_format_round_trips_and_rejects_garbage() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = random_lrd(6, 2, &mut rng);
        let bytes = q.to_bytes();
        assert_eq!(&bytes[..8], b"PBAMGLRD");
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 6);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 24 + 8 * (6 + 12 + 6));
        let back = GaussianLrd::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);

        assert!(GaussianLrd::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(GaussianLrd::from_bytes(&bad).is_err());
    }
}
