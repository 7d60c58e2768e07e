//! Batch and match steps of score-based variational inference.
//!
//! A batch of `B` samples from the current approximation `q_t` and the target
//! scores at those samples are summarized in [`BatchStats`]. The match step
//! solves the KL-regularized score-matching problem in closed form. With
//! `Σ_t = ΛΛᵀ + Ψ_t` the result is held implicitly as
//!
//! ```text
//! Σ_{t+½} = Ψ_t + RRᵀ − H M Hᵀ,   H = (Ψ_t + RRᵀ) Q,
//! M = [½I + (HᵀQ + ¼I)^{½}]⁻²
//! ```
//!
//! where `Q` (`D x (B+1)`) factors the score statistics and `R`
//! (`D x (B+1+K)`) factors `Σ_t` plus the sample statistics. Memory and time
//! are linear in `D`.
//!
//! [`dense_bam_step`] is the full-covariance reference, computed by an
//! independent route through `V^{½}`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg;
use crate::lowrank::{Capacitance, GaussianLrd, LowRankDiag};
use crate::targets::ScoreTarget;

/// Relative tolerance for negative eigenvalues of the symmetrized matrices
/// under a square root; anything between this and zero is clamped.
pub const EIGEN_CLAMP_TOL: f64 = 1e-6;

/// Sample and score statistics of one batch.
///
/// The covariances `C` and `Γ` are kept as their centered `D x B` factors,
/// since both have rank at most `B`.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub z_bar: DVector<f64>,
    pub g_bar: DVector<f64>,
    pub z_centered: DMatrix<f64>,
    pub g_centered: DMatrix<f64>,
}

impl BatchStats {
    /// Statistics from samples and scores stored column-wise.
    pub fn from_samples(z: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<Self> {
        if z.shape() != g.shape() {
            return Err(Error::Dimension {
                what: "score batch columns",
                expected: z.ncols(),
                found: g.ncols(),
            });
        }
        if z.ncols() == 0 {
            return Err(Error::InvalidParameter("batch size must be at least 1".into()));
        }
        let (z_bar, z_centered) = center(z);
        let (g_bar, g_centered) = center(g);
        Ok(Self {
            z_bar,
            g_bar,
            z_centered,
            g_centered,
        })
    }

    pub fn dim(&self) -> usize {
        self.z_bar.len()
    }

    pub fn batch_size(&self) -> usize {
        self.z_centered.ncols()
    }
}

fn center(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let mean = x.column_mean();
    let mut centered = x.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    (mean, centered)
}

/// Draws `B` samples from `q`, evaluates the target score at each, and returns
/// the batch statistics. Makes exactly `B` score evaluations.
pub fn collect_batch<R: Rng + ?Sized>(
    q: &GaussianLrd,
    target: &dyn ScoreTarget,
    batch_size: usize,
    rng: &mut R,
) -> Result<BatchStats> {
    if batch_size == 0 {
        return Err(Error::InvalidParameter("batch size must be at least 1".into()));
    }
    if target.dim() != q.dim() {
        return Err(Error::Dimension {
            what: "target dimension",
            expected: q.dim(),
            found: target.dim(),
        });
    }
    let z = q.sample_columns(batch_size, rng);
    let g = target.score_columns(&z);
    check_scores(&g)?;
    BatchStats::from_samples(&z, &g)
}

pub(crate) fn check_scores(g: &DMatrix<f64>) -> Result<()> {
    for (b, col) in g.column_iter().enumerate() {
        let non_finite = col.iter().filter(|v| !v.is_finite()).count();
        if non_finite > 0 {
            return Err(Error::NonFiniteScore { sample: b, non_finite });
        }
    }
    Ok(())
}

fn check_lambda(lambda_t: f64) -> Result<()> {
    if lambda_t.is_finite() && lambda_t > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "learning rate must be positive and finite, got {lambda_t}"
        )))
    }
}

/// `Q = [√(λ/B)(g_b − ḡ) …, √(λ/(1+λ)) ḡ]`, so that
/// `QQᵀ = λΓ + λ/(1+λ) ḡḡᵀ`.
pub fn build_q(stats: &BatchStats, lambda_t: f64) -> DMatrix<f64> {
    let (d, b) = (stats.dim(), stats.batch_size());
    let mut q = DMatrix::zeros(d, b + 1);
    let w = (lambda_t / b as f64).sqrt();
    q.columns_mut(0, b).copy_from(&(&stats.g_centered * w));
    q.set_column(b, &(&stats.g_bar * (lambda_t / (1.0 + lambda_t)).sqrt()));
    q
}

/// `R = [√(λ/B)(z_b − z̄) …, √(λ/(1+λ))(μ_t − z̄), Λ_t]`, so that
/// `Ψ_t + RRᵀ = Σ_t + λC + λ/(1+λ)(μ_t − z̄)(μ_t − z̄)ᵀ`.
pub fn build_r(stats: &BatchStats, q: &GaussianLrd, lambda_t: f64) -> DMatrix<f64> {
    let (d, b, k) = (stats.dim(), stats.batch_size(), q.rank());
    let mut r = DMatrix::zeros(d, b + 1 + k);
    let w = (lambda_t / b as f64).sqrt();
    r.columns_mut(0, b).copy_from(&(&stats.z_centered * w));
    let shift = (q.mu() - &stats.z_bar) * (lambda_t / (1.0 + lambda_t)).sqrt();
    r.set_column(b, &shift);
    r.columns_mut(b + 1, k).copy_from(q.lambda());
    r
}

/// Covariance `Ψ_t + RRᵀ − HMHᵀ` stored by its factors.
#[derive(Clone, Debug)]
pub struct ImplicitCov {
    psi: DVector<f64>,
    r: DMatrix<f64>,
    h: DMatrix<f64>,
    m: DMatrix<f64>,
}

impl ImplicitCov {
    pub fn from_parts(psi: DVector<f64>, r: DMatrix<f64>, h: DMatrix<f64>, m: DMatrix<f64>) -> Result<Self> {
        let d = psi.len();
        for (what, rows) in [("R rows", r.nrows()), ("H rows", h.nrows())] {
            if rows != d {
                return Err(Error::Dimension {
                    what,
                    expected: d,
                    found: rows,
                });
            }
        }
        if m.shape() != (h.ncols(), h.ncols()) {
            return Err(Error::Dimension {
                what: "core matrix M",
                expected: h.ncols(),
                found: m.nrows(),
            });
        }
        Ok(Self { psi, r, h, m })
    }

    /// Exact representation of `ΛΛᵀ + Ψ` (no subtracted term).
    pub fn from_low_rank(cov: &LowRankDiag) -> Self {
        let d = cov.dim();
        Self {
            psi: cov.psi().clone(),
            r: cov.lambda().clone(),
            h: DMatrix::zeros(d, 0),
            m: DMatrix::zeros(0, 0),
        }
    }

    pub fn dim(&self) -> usize {
        self.psi.len()
    }

    pub fn psi(&self) -> &DVector<f64> {
        &self.psi
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn m(&self) -> &DMatrix<f64> {
        &self.m
    }

    /// `Σ X = Ψ_t⊙X + R(RᵀX) − H(M(HᵀX))`, in `O(D (K+B) n)`.
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = linalg::scale_rows(x, &self.psi);
        out.gemm(1.0, &self.r, &self.r.tr_mul(x), 1.0);
        out.gemm(-1.0, &self.h, &(&self.m * self.h.tr_mul(x)), 1.0);
        out
    }

    pub fn apply_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let m = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        self.apply(&m).column(0).into_owned()
    }

    /// `ψ_t + rowsum(R⊙R) − rowsum((HM)⊙H)`.
    pub fn diagonal(&self) -> DVector<f64> {
        let hm = &self.h * &self.m;
        &self.psi + linalg::row_sq_norms(&self.r) - linalg::row_dots(&hm, &self.h)
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().sum()
    }

    /// `log |Σ|`, as `log|V| + log|I − M^{½} HᵀV⁻¹H M^{½}|` with
    /// `V = Ψ_t + RRᵀ`. Costs `O(D (K+B)^2)`.
    pub fn logdet(&self) -> Result<f64> {
        let cap = Capacitance::new(&self.r, &self.psi)?;
        if self.h.ncols() == 0 {
            return Ok(cap.logdet());
        }
        let g = self.h.tr_mul(&cap.solve(&self.h)?);
        let m_eig = linalg::sym_eigen(&self.m);
        let m_half = linalg::eigen_apply(&m_eig, |v| v.max(0.0).sqrt());
        let mut t = -(&m_half * g * &m_half);
        for i in 0..t.nrows() {
            t[(i, i)] += 1.0;
        }
        let chol = linalg::cholesky(&t, "implicit covariance determinant")?;
        Ok(cap.logdet() + linalg::chol_logdet(&chol))
    }

    /// Dense `D x D` reconstruction; for tests and small-dimensional checks.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = &self.r * self.r.transpose() - &self.h * &self.m * self.h.transpose();
        for i in 0..self.dim() {
            out[(i, i)] += self.psi[i];
        }
        out
    }
}

/// Closed-form covariance update of the match step, kept implicit.
///
/// Cost `O(D B^2 + B^3 + K B D)`; nothing of size `D x D` is allocated.
pub fn match_step(q: &GaussianLrd, stats: &BatchStats, lambda_t: f64) -> Result<ImplicitCov> {
    check_lambda(lambda_t)?;
    if stats.dim() != q.dim() {
        return Err(Error::Dimension {
            what: "batch statistics",
            expected: q.dim(),
            found: stats.dim(),
        });
    }
    let qm = build_q(stats, lambda_t);
    let r = build_r(stats, q, lambda_t);
    let mut h = linalg::scale_rows(&qm, q.psi());
    h.gemm(1.0, &r, &r.tr_mul(&qm), 1.0);

    let mut inner = h.tr_mul(&qm);
    for i in 0..inner.nrows() {
        inner[(i, i)] += 0.25;
    }
    let eig = linalg::sym_eigen(&inner);
    let norm = eig.eigenvalues.amax();
    let min = eig.eigenvalues.min();
    if min < -EIGEN_CLAMP_TOL * norm {
        return Err(Error::NotPositiveSemidefinite {
            lambda_t,
            min_eigenvalue: min,
            norm,
        });
    }
    let m = linalg::eigen_apply(&eig, |v| (0.5 + v.max(0.0).sqrt()).powi(-2));
    ImplicitCov::from_parts(q.psi().clone(), r, h, m)
}

/// `μ_{t+1} = μ_t/(1+λ) + λ/(1+λ)(Σ_{t+1} ḡ + z̄)` with the patched covariance.
pub fn mean_update(mu_t: &DVector<f64>, stats: &BatchStats, lambda_t: f64, sigma_next: &LowRankDiag) -> DVector<f64> {
    let step = sigma_next.mul_vec(&stats.g_bar) + &stats.z_bar;
    mu_t / (1.0 + lambda_t) + step * (lambda_t / (1.0 + lambda_t))
}

/// Gaussian with an explicit dense covariance, for the full-covariance
/// reference path at small `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGaussian {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl DenseGaussian {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        if sigma.shape() != (mu.len(), mu.len()) {
            return Err(Error::Dimension {
                what: "dense covariance",
                expected: mu.len(),
                found: sigma.nrows(),
            });
        }
        Ok(Self { mu, sigma })
    }

    pub fn from_lrd(q: &GaussianLrd) -> Self {
        Self {
            mu: q.mu().clone(),
            sigma: q.cov().to_dense(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Samples `z = μ + Lε` with `Σ = LLᵀ`, one per column.
    pub fn sample_columns<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        let chol = linalg::cholesky(&self.sigma, "dense covariance")?;
        let eps = DMatrix::from_fn(self.dim(), n, |_, _| rng.sample(rand_distr::StandardNormal));
        let mut z = chol.l() * eps;
        for mut col in z.column_iter_mut() {
            col += &self.mu;
        }
        Ok(z)
    }

    /// Converts to the structured family with `K = D`, using
    /// `Σ = L Lᵀ + ψ I` where `LLᵀ` is the Cholesky factor of `Σ − ψI` and
    /// `ψ` the diagonal floor.
    pub fn to_lrd(&self) -> Result<GaussianLrd> {
        let d = self.dim();
        let floor = crate::lowrank::PSI_FLOOR;
        let shifted = &self.sigma - DMatrix::identity(d, d) * floor;
        let chol = linalg::cholesky(&shifted, "dense covariance")?;
        GaussianLrd::new(self.mu.clone(), chol.l(), DVector::from_element(d, floor))
    }
}

/// One full-covariance BaM iteration.
///
/// Uses the symmetric form
/// `Σ_{t+1} = 2 V^{½} [I + (I + 4 V^{½} U V^{½})^{½}]⁻¹ V^{½}`
/// with `U` and `V` assembled densely from the batch statistics, followed by
/// the mean update. Costs `O(D^3)`.
pub fn dense_bam_step(q: &DenseGaussian, stats: &BatchStats, lambda_t: f64) -> Result<DenseGaussian> {
    if !(lambda_t.is_finite() && lambda_t >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "learning rate must be non-negative and finite, got {lambda_t}"
        )));
    }
    if stats.dim() != q.dim() {
        return Err(Error::Dimension {
            what: "batch statistics",
            expected: q.dim(),
            found: stats.dim(),
        });
    }
    let d = q.dim();
    let b = stats.batch_size() as f64;
    let shrink = lambda_t / (1.0 + lambda_t);

    let gamma = &stats.g_centered * stats.g_centered.transpose() / b;
    let c = &stats.z_centered * stats.z_centered.transpose() / b;
    let u = gamma * lambda_t + &stats.g_bar * stats.g_bar.transpose() * shrink;
    let shift = &q.mu - &stats.z_bar;
    let v = &q.sigma + c * lambda_t + &shift * shift.transpose() * shrink;

    let v_eig = linalg::sym_eigen(&v);
    let v_norm = v_eig.eigenvalues.amax();
    if v_eig.eigenvalues.min() < -EIGEN_CLAMP_TOL * v_norm {
        return Err(Error::NotPositiveSemidefinite {
            lambda_t,
            min_eigenvalue: v_eig.eigenvalues.min(),
            norm: v_norm,
        });
    }
    let v_half = linalg::eigen_apply(&v_eig, |e| e.max(0.0).sqrt());

    let mut inner = &v_half * u * &v_half * 4.0;
    for i in 0..d {
        inner[(i, i)] += 1.0;
    }
    let eig = linalg::sym_eigen(&inner);
    let norm = eig.eigenvalues.amax();
    let min = eig.eigenvalues.min();
    if min < -EIGEN_CLAMP_TOL * norm {
        return Err(Error::NotPositiveSemidefinite {
            lambda_t,
            min_eigenvalue: min,
            norm,
        });
    }
    let middle = linalg::eigen_apply(&eig, |e| 2.0 / (1.0 + e.max(0.0).sqrt()));
    let sigma = linalg::symmetrize(&(&v_half * middle * &v_half));

    let mu = &q.mu / (1.0 + lambda_t) + (&sigma * &stats.g_bar + &stats.z_bar) * shrink;
    DenseGaussian::new(mu, sigma)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleRule {
    /// `λ_t = λ₀ / (1 + t)`.
    InverseTime,
    Constant,
}

impl FromStr for ScheduleRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inverse-time" => Ok(Self::InverseTime),
            "constant" => Ok(Self::Constant),
            other => Err(Error::InvalidParameter(format!("unknown schedule rule {other:?}"))),
        }
    }
}

impl fmt::Display for ScheduleRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::InverseTime => "inverse-time",
            Self::Constant => "constant",
        })
    }
}

/// Learning-rate schedule for the proximal step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearningSchedule {
    lambda0: f64,
    rule: ScheduleRule,
}

impl LearningSchedule {
    pub fn new(lambda0: f64, rule: ScheduleRule) -> Result<Self> {
        check_lambda(lambda0)?;
        Ok(Self { lambda0, rule })
    }

    pub fn lambda0(&self) -> f64 {
        self.lambda0
    }

    pub fn rule(&self) -> ScheduleRule {
        self.rule
    }

    pub fn value(&self, t: usize) -> f64 {
        match self.rule {
            ScheduleRule::InverseTime => self.lambda0 / (1.0 + t as f64),
            ScheduleRule::Constant => self.lambda0,
        }
    }
}

impl Default for LearningSchedule {
    fn default() -> Self {
        Self {
            lambda0: 1.0,
            rule: ScheduleRule::InverseTime,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::{FnTarget, GaussianTarget};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    fn random_q(d: usize, k: usize, rng: &mut ChaCha8Rng) -> GaussianLrd {
        let mu = randn(d, 1, rng).column(0).into_owned();
        let psi = DVector::from_fn(d, |_, _| rng.random_range(0.3..1.5));
        GaussianLrd::new(mu, randn(d, k, rng), psi).unwrap()
    }

    fn random_stats(d: usize, b: usize, rng: &mut ChaCha8Rng) -> BatchStats {
        BatchStats::from_samples(&randn(d, b, rng), &randn(d, b, rng)).unwrap()
    }

    fn dense_u(stats: &BatchStats, lambda: f64) -> DMatrix<f64> {
        let (d, b) = (stats.dim(), stats.batch_size());
        let mut u = DMatrix::zeros(d, d);
        for g in stats.g_centered.column_iter() {
            u += g * g.transpose() * (lambda / b as f64);
        }
        u + &stats.g_bar * stats.g_bar.transpose() * (lambda / (1.0 + lambda))
    }

    fn dense_v(q: &GaussianLrd, stats: &BatchStats, lambda: f64) -> DMatrix<f64> {
        let b = stats.batch_size() as f64;
        let mut v = q.cov().to_dense();
        for z in stats.z_centered.column_iter() {
            v += z * z.transpose() * (lambda / b);
        }
        let s = q.mu() - &stats.z_bar;
        v + &s * s.transpose() * (lambda / (1.0 + lambda))
    }

    #[test]
    fn linear_score_statistics() {
        let d = 4;
        let q = GaussianLrd::standard(d);
        let target = FnTarget::new(d, |z: &DVector<f64>| -z);
        let stats = collect_batch(&q, &target, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!((&stats.g_bar + &stats.z_bar).amax() < 1e-15);
        assert!((&stats.g_centered + &stats.z_centered).amax() < 1e-15);
    }

    #[test]
    fn single_sample_batch_has_zero_centered_columns() {
        let q = GaussianLrd::standard(3);
        let target = FnTarget::new(3, |z: &DVector<f64>| -z * 2.0);
        let stats = collect_batch(&q, &target, 1, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(stats.z_centered, DMatrix::zeros(3, 1));
        assert_eq!(stats.g_centered, DMatrix::zeros(3, 1));
    }

    #[test]
    fn batch_means_match_loop_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_q(3, 1, &mut rng);
        let target = GaussianTarget::new(random_q(3, 2, &mut rng)).unwrap();
        let stats = collect_batch(&q, &target, 4, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();

        let z = q.sample_columns(4, &mut ChaCha8Rng::seed_from_u64(6));
        let mut z_sum = [0.0; 3];
        let mut g_sum = [0.0; 3];
        for b in 0..4 {
            let g = target.score(&z.column(b).into_owned());
            for i in 0..3 {
                z_sum[i] += z[(i, b)];
                g_sum[i] += g[i];
            }
        }
        for i in 0..3 {
            assert!((stats.z_bar[i] - z_sum[i] / 4.0).abs() < 1e-12);
            assert!((stats.g_bar[i] - g_sum[i] / 4.0).abs() < 1e-12);
        }
        for col in stats.z_centered.row_iter() {
            assert!(col.sum().abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_score_reports_sample() {
        let q = GaussianLrd::standard(2);
        let target = FnTarget::new(2, |z: &DVector<f64>| {
            if z[0] > -100.0 {
                DVector::from_vec(vec![f64::NAN, 1.0])
            } else {
                z.clone()
            }
        });
        let err = collect_batch(&q, &target, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap_err();
        assert!(matches!(
            err,
            Error::NonFiniteScore {
                sample: 0,
                non_finite: 1
            }
        ));
    }

    #[test]
    fn q_factor_reproduces_u() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &lambda in &[0.1, 1.0, 10.0] {
            let stats = random_stats(6, 3, &mut rng);
            let q = build_q(&stats, lambda);
            let dense = &q * q.transpose();
            assert!((dense - dense_u(&stats, lambda)).amax() < 1e-12);
        }
    }

    #[test]
    fn q_factor_handworked() {
        // g1 = (1, 0), g2 = (3, 2): ḡ = (2, 1), centered ±(1, 1).
        let z = DMatrix::zeros(2, 2);
        let g = DMatrix::from_column_slice(2, 2, &[1.0, 0.0, 3.0, 2.0]);
        let stats = BatchStats::from_samples(&z, &g).unwrap();
        let q = build_q(&stats, 1.0);
        let qqt = &q * q.transpose();
        // ½·[(1,1)(1,1)ᵀ + (1,1)(1,1)ᵀ] + ½·(2,1)(2,1)ᵀ
        let expected = DMatrix::from_row_slice(2, 2, &[1.0 + 2.0, 1.0 + 1.0, 1.0 + 1.0, 1.0 + 0.5]);
        assert!((qqt - expected).amax() < 1e-12);

        let zero_mean = BatchStats::from_samples(&z, &(&g * 0.0)).unwrap();
        assert_eq!(build_q(&zero_mean, 1.0).column(2).amax(), 0.0);
    }

    #[test]
    fn r_factor_reproduces_v() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = random_q(3, 1, &mut rng);
        let stats = random_stats(3, 2, &mut rng);
        let r = build_r(&stats, &q, 0.7);
        let mut dense = &r * r.transpose();
        for i in 0..3 {
            dense[(i, i)] += q.psi()[i];
        }
        assert!((dense - dense_v(&q, &stats, 0.7)).amax() < 1e-12);

        let centered = GaussianLrd::from_cov(stats.z_bar.clone(), q.cov().clone()).unwrap();
        assert_eq!(build_r(&stats, &centered, 0.7).column(2).amax(), 0.0);
    }

    #[test]
    fn r_factor_small_learning_rate_freezes_v() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = random_q(4, 2, &mut rng);
        let stats = random_stats(4, 3, &mut rng);
        let r = build_r(&stats, &q, 1e-14);
        let rrt = &r * r.transpose();
        let llt = q.lambda() * q.lambda().transpose();
        assert!((rrt - llt).amax() < 1e-6);
    }

    fn dense_eq10(q: &GaussianLrd, stats: &BatchStats, lambda: f64) -> DMatrix<f64> {
        let v = dense_v(q, stats, lambda);
        let u = dense_u(stats, lambda);
        // Any Q with QQᵀ = U gives the same update; use the eigenfactor.
        let eig = u.clone().symmetric_eigen();
        let mut qf = eig.eigenvectors.clone();
        for (j, mut col) in qf.column_iter_mut().enumerate() {
            col *= eig.eigenvalues[j].max(0.0).sqrt();
        }
        let mut s = qf.transpose() * &v * &qf;
        for i in 0..s.nrows() {
            s[(i, i)] += 0.25;
        }
        let se = s.symmetric_eigen();
        let mut core = se.eigenvectors.clone();
        for (j, mut col) in core.column_iter_mut().enumerate() {
            col *= (0.5 + se.eigenvalues[j].max(0.0).sqrt()).powi(-2);
        }
        let m = core * se.eigenvectors.transpose();
        &v - &v * &qf * m * qf.transpose() * &v
    }

    #[test]
    fn match_step_matches_dense_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let q = random_q(4, 2, &mut rng);
        let stats = random_stats(4, 3, &mut rng);
        let implicit = match_step(&q, &stats, 0.8).unwrap();
        let expected = dense_eq10(&q, &stats, 0.8);
        assert!((implicit.to_dense() - &expected).norm() <= 1e-8 * expected.norm());
    }

    #[test]
    fn zero_scores_only_inflate() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = random_q(5, 2, &mut rng);
        let z = randn(5, 4, &mut rng);
        let stats = BatchStats::from_samples(&z, &DMatrix::zeros(5, 4)).unwrap();
        let implicit = match_step(&q, &stats, 2.0).unwrap();
        let v = dense_v(&q, &stats, 2.0);
        assert!((implicit.to_dense() - v).amax() < 1e-12);
    }

    #[test]
    fn exact_scores_keep_covariance_near_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let q = random_q(2, 1, &mut rng);
        let target = GaussianTarget::new(q.clone()).unwrap();
        let stats = collect_batch(&q, &target, 512, &mut rng).unwrap();
        let implicit = match_step(&q, &stats, 1.0).unwrap();
        let err = (implicit.to_dense() - q.cov().to_dense()).amax();
        assert!(err < 0.2, "drift {err}");
    }

    #[test]
    fn implicit_diagonal_and_logdet_match_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let q = random_q(6, 2, &mut rng);
        let stats = random_stats(6, 3, &mut rng);
        let implicit = match_step(&q, &stats, 1.3).unwrap();
        let dense = implicit.to_dense();
        assert!((implicit.diagonal() - dense.diagonal()).amax() < 1e-10);
        let x = randn(6, 2, &mut rng);
        assert!((implicit.apply(&x) - &dense * &x).amax() < 1e-10);
        let logdet = dense.determinant().ln();
        assert!((implicit.logdet().unwrap() - logdet).abs() < 1e-9);

        let plain = ImplicitCov::from_low_rank(q.cov());
        assert!((plain.to_dense() - q.cov().to_dense()).amax() < 1e-14);
        assert!((plain.logdet().unwrap() - q.logdet().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn mean_update_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let q = random_q(3, 1, &mut rng);
        let z = randn(3, 4, &mut rng);
        let mut stats = BatchStats::from_samples(&z, &randn(3, 4, &mut rng)).unwrap();

        let mut stationary = stats.clone();
        stationary.g_bar.fill(0.0);
        stationary.z_bar = q.mu().clone();
        let mu = mean_update(q.mu(), &stationary, 0.5, q.cov());
        assert!((mu - q.mu()).amax() < 1e-15);

        let huge = mean_update(q.mu(), &stats, 1e12, q.cov());
        let limit = q.cov().mul_vec(&stats.g_bar) + &stats.z_bar;
        assert!((huge - limit).amax() < 1e-9);

        stats.g_bar[1] += 0.3;
        let fast = mean_update(q.mu(), &stats, 0.4, q.cov());
        let dense = q.mu() / 1.4 + (q.cov().to_dense() * &stats.g_bar + &stats.z_bar) * (0.4 / 1.4);
        assert!((fast - dense).amax() < 1e-12);
    }

    #[test]
    fn dense_step_agrees_with_implicit_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let q = random_q(5, 3, &mut rng);
        let stats = random_stats(5, 4, &mut rng);
        let implicit = match_step(&q, &stats, 1.0).unwrap().to_dense();
        let dense = dense_bam_step(&DenseGaussian::from_lrd(&q), &stats, 1.0).unwrap();
        assert!((&implicit - &dense.sigma).norm() <= 1e-8 * dense.sigma.norm());
    }

    #[test]
    fn dense_step_with_zero_rate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let q = DenseGaussian::from_lrd(&random_q(4, 2, &mut rng));
        let stats = random_stats(4, 3, &mut rng);
        let next = dense_bam_step(&q, &stats, 0.0).unwrap();
        assert!((&next.sigma - &q.sigma).amax() < 1e-12);
        assert!((&next.mu - &q.mu).amax() < 1e-15);
    }

    #[test]
    fn dense_step_fixed_point_for_standard_normal() {
        let d = 2;
        let q = DenseGaussian::new(DVector::zeros(d), DMatrix::identity(d, d)).unwrap();
        let target = FnTarget::new(d, |z: &DVector<f64>| -z);
        let stats = collect_batch(
            &GaussianLrd::standard(d),
            &target,
            64,
            &mut ChaCha8Rng::seed_from_u64(17),
        )
        .unwrap();
        let next = dense_bam_step(&q, &stats, 1.0).unwrap();
        assert!((next.sigma - DMatrix::identity(d, d)).amax() < 0.5);
    }

    #[test]
    fn schedule_values() {
        let s = LearningSchedule::new(1.0, ScheduleRule::InverseTime).unwrap();
        assert_eq!(s.value(0), 1.0);
        assert_eq!(s.value(3), 0.25);
        let c = LearningSchedule::new(2.5, ScheduleRule::Constant).unwrap();
        assert_eq!(c.value(1000), 2.5);
        assert!("cosine".parse::<ScheduleRule>().is_err());
        assert_eq!(
            "inverse-time".parse::<ScheduleRule>().unwrap(),
            ScheduleRule::InverseTime
        );
        assert!(LearningSchedule::new(0.0, ScheduleRule::Constant).is_err());
    }
}
