//! Projection of an implicit covariance onto the low-rank-plus-diagonal family.
//!
//! Minimizes `KL(N(0, Σ_{t+½}) ‖ N(0, ΛΛᵀ + Ψ))` over `(Λ, Ψ)` with the
//! infinite-data EM iteration for factor analysis:
//!
//! ```text
//! β   = Λᵀ(ΛΛᵀ + Ψ)⁻¹
//! Λ'  = Σβᵀ (βΣβᵀ + I − βΛ)⁻¹
//! Ψ'  = diag((I − Λ'β) Σ)
//! ```
//!
//! followed by an over-relaxed blend with momentum `η`. Each step costs
//! `O(D K^2 + K^3 + K B D)`; `Σ` is only ever touched through
//! [`ImplicitCov::apply`] and [`ImplicitCov::diagonal`].

use nalgebra::DMatrix;

use crate::bam::ImplicitCov;
use crate::error::{Error, Result};
use crate::linalg;
use crate::lowrank::{LowRankDiag, PSI_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchConfig {
    /// Momentum, in `(0, 2)`.
    pub eta: f64,
    /// Early-stopping tolerance on the relative change of the surrogate.
    pub tol: f64,
    pub max_steps: usize,
    pub rank: usize,
}

impl PatchConfig {
    pub fn new(eta: f64, tol: f64, max_steps: usize, rank: usize) -> Result<Self> {
        let cfg = Self {
            eta,
            tol,
            max_steps,
            rank,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults `η = 1.2`, `ε = 1e-4`, `N = 500`.
    pub fn with_rank(rank: usize) -> Self {
        Self {
            eta: 1.2,
            tol: 1e-4,
            max_steps: 500,
            rank,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta < 2.0) {
            return Err(Error::InvalidParameter(format!("momentum {} outside (0, 2)", self.eta)));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "tolerance {} must be positive",
                self.tol
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidParameter("max_steps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PatchReport {
    pub steps_taken: usize,
    /// Surrogate before the first step, then after every step.
    pub kl_surrogate_trace: Vec<f64>,
    /// The early-stopping test fired (as opposed to exhausting the budget).
    pub stopped_early: bool,
    /// Blended diagonal entries that fell below the floor, summed over steps.
    pub floored_entries: usize,
}

/// `β = Λᵀ(ΛΛᵀ + Ψ)⁻¹` as a `K x D` matrix, via `(I + ΛᵀΨ⁻¹Λ)⁻¹ΛᵀΨ⁻¹`.
pub fn em_beta(cov: &LowRankDiag) -> Result<DMatrix<f64>> {
    Ok(cov.capacitance()?.lambda_t_inverse())
}

/// Output of one EM step.
#[derive(Clone, Debug)]
pub struct EmStep {
    pub cov: LowRankDiag,
    pub floored: usize,
}

/// One momentum-blended EM step. `Λ'` is computed first, `Ψ'` uses `Λ'`, then
/// both are blended with the previous iterate.
pub fn em_step(sigma: &ImplicitCov, cov: &LowRankDiag, eta: f64) -> Result<EmStep> {
    if sigma.dim() != cov.dim() {
        return Err(Error::Dimension {
            what: "patch target",
            expected: cov.dim(),
            found: sigma.dim(),
        });
    }
    let k = cov.rank();
    let beta = em_beta(cov)?;
    let sigma_beta_t = sigma.apply(&beta.transpose());

    let mut inner = &beta * &sigma_beta_t - &beta * cov.lambda();
    for i in 0..k {
        inner[(i, i)] += 1.0;
    }
    let chol = linalg::cholesky(&inner, "EM update βΣβᵀ + I − βΛ")?;
    // Λ' = SβT A⁻¹  ⇔  Λ'ᵀ = A⁻¹ SβTᵀ (A symmetric).
    let lambda_new = chol.solve(&sigma_beta_t.transpose()).transpose();
    let psi_new = sigma.diagonal() - linalg::row_dots(&lambda_new, &sigma_beta_t);

    let lambda_blend = cov.lambda() * (1.0 - eta) + lambda_new * eta;
    let mut psi_blend = cov.psi() * (1.0 - eta) + &psi_new * eta;
    let mut floored = 0;
    // An over-relaxed entry that overshoots falls back to its plain EM value.
    // Flooring it instead would trap it: ψᵢ ≈ 0 is a fixed point of EM.
    for (p, plain) in psi_blend.iter_mut().zip(psi_new.iter()) {
        if !(*p >= PSI_FLOOR) {
            *p = if *plain >= PSI_FLOOR { *plain } else { PSI_FLOOR };
            floored += 1;
        }
    }
    if floored == psi_blend.len() {
        return Err(Error::DegenerateDiagonal);
    }
    Ok(EmStep {
        cov: LowRankDiag::new(lambda_blend, psi_blend)?,
        floored,
    })
}

/// `log|A| + tr(A⁻¹Σ)` with `A = ΛΛᵀ + Ψ`.
///
/// Equals `2·KL(N(0,Σ) ‖ N(0,A)) + D + log|Σ|`. The trace splits as
/// `tr(A⁻¹Ψ_t) + tr(RᵀA⁻¹R) − tr(M HᵀA⁻¹H)`.
pub fn kl_surrogate(sigma: &ImplicitCov, cov: &LowRankDiag) -> Result<f64> {
    let cap = cov.capacitance()?;
    let diag_part = cap.inverse_diagonal().dot(sigma.psi());
    let r_part = linalg::frobenius_dot(sigma.r(), &cap.solve(sigma.r())?);
    let h_part = if sigma.h().ncols() == 0 {
        0.0
    } else {
        let hth = sigma.h().tr_mul(&cap.solve(sigma.h())?);
        linalg::frobenius_dot(sigma.m(), &hth)
    };
    Ok(cap.logdet() + diag_part + r_part - h_part)
}

/// `KL(N(0,Σ) ‖ N(0,ΛΛᵀ+Ψ))` including the constant terms.
pub fn patch_kl(sigma: &ImplicitCov, cov: &LowRankDiag) -> Result<f64> {
    let surrogate = kl_surrogate(sigma, cov)?;
    Ok(0.5 * (surrogate - sigma.dim() as f64 - sigma.logdet()?))
}

fn converged(prev: f64, next: f64, tol: f64) -> bool {
    (next - prev).abs() <= tol * prev.abs().max(1.0)
}

/// Runs EM steps from a warm start until the surrogate stalls or
/// `cfg.max_steps` steps have been taken.
pub fn patch(sigma: &ImplicitCov, init: LowRankDiag, cfg: &PatchConfig) -> Result<(LowRankDiag, PatchReport)> {
    cfg.validate()?;
    if init.rank() != cfg.rank {
        return Err(Error::Dimension {
            what: "patch initial rank",
            expected: cfg.rank,
            found: init.rank(),
        });
    }
    let mut report = PatchReport::default();
    let mut current = init;
    let mut kl = kl_surrogate(sigma, &current)?;
    report.kl_surrogate_trace.push(kl);
    if !kl.is_finite() {
        return Err(Error::PatchDiverged {
            trace: report.kl_surrogate_trace,
        });
    }

    for _ in 0..cfg.max_steps {
        let step = em_step(sigma, &current, cfg.eta)?;
        current = step.cov;
        report.floored_entries += step.floored;
        report.steps_taken += 1;
        let next = kl_surrogate(sigma, &current)?;
        report.kl_surrogate_trace.push(next);
        if !next.is_finite() {
            return Err(Error::PatchDiverged {
                trace: report.kl_surrogate_trace,
            });
        }
        let done = converged(kl, next, cfg.tol);
        kl = next;
        if done {
            report.stopped_early = true;
            break;
        }
    }
    Ok((current, report))
}

/// Dense `D x D` EM step used as a test oracle elsewhere in the crate.
#[cfg(test)]
pub(crate) fn dense_em_step(
    sigma: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
    psi: &nalgebra::DVector<f64>,
    eta: f64,
) -> (DMatrix<f64>, nalgebra::DVector<f64>) {
    let a = lambda * lambda.transpose() + DMatrix::from_diagonal(psi);
    let beta = lambda.transpose() * a.try_inverse().unwrap();
    let k = lambda.ncols();
    let inner = &beta * sigma * beta.transpose() + DMatrix::identity(k, k) - &beta * lambda;
    let lambda_new = sigma * beta.transpose() * inner.try_inverse().unwrap();
    let d = sigma.nrows();
    let psi_new = ((DMatrix::identity(d, d) - &lambda_new * &beta) * sigma).diagonal();
    (
        lambda * (1.0 - eta) + lambda_new * eta,
        psi * (1.0 - eta) + psi_new * eta,
    )
}
