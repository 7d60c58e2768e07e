//! Iteration drivers for batch-match-patch and the dense reference.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::bam::{self, BatchStats, DenseGaussian, LearningSchedule};
use crate::error::{Error, Result};
use crate::lowrank::GaussianLrd;
use crate::patch::{self, PatchConfig, PatchReport};
use crate::targets::ScoreTarget;

/// Default number of times the learning rate is halved after a numeric
/// breakdown before the run gives up.
pub const DEFAULT_MAX_RETRIES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PbamConfig {
    pub batch_size: usize,
    pub schedule: LearningSchedule,
    pub patch: PatchConfig,
    pub max_retries: usize,
}

impl PbamConfig {
    pub fn new(batch_size: usize, schedule: LearningSchedule, patch: PatchConfig) -> Self {
        Self {
            batch_size,
            schedule,
            patch,
            max_retries: DEFAULT_MAX_RETRIES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be at least 1".into()));
        }
        self.patch.validate()
    }
}

/// `μ₀ = 0`, `Λ₀ᵢⱼ ~ N(0, 1/D)`, `Ψ₀ = I`.
pub fn initial_q<R: Rng + ?Sized>(d: usize, k: usize, rng: &mut R) -> Result<GaussianLrd> {
    let sd = 1.0 / (d as f64).sqrt();
    let lambda = DMatrix::from_fn(d, k, |_, _| sd * rng.sample::<f64, _>(StandardNormal));
    GaussianLrd::new(DVector::zeros(d), lambda, DVector::from_element(d, 1.0))
}

/// Match, patch from a warm start at `q`'s covariance, then move the mean.
pub fn pbam_update(
    q: &GaussianLrd,
    stats: &BatchStats,
    lambda_t: f64,
    patch_cfg: &PatchConfig,
) -> Result<(GaussianLrd, PatchReport)> {
    let half = bam::match_step(q, stats, lambda_t)?;
    let (cov, report) = patch::patch(&half, q.cov().clone(), patch_cfg)?;
    let mu = bam::mean_update(q.mu(), stats, lambda_t, &cov);
    if mu.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteUpdate("updated mean"));
    }
    Ok((GaussianLrd::from_cov(mu, cov)?, report))
}

#[derive(Clone, Debug)]
pub struct PbamStep {
    /// Learning rate that produced the accepted update.
    pub lambda_t: f64,
    pub retries: usize,
    pub patch: PatchReport,
}

/// Batch-match-patch run state.
#[derive(Clone, Debug)]
pub struct PbamState {
    cfg: PbamConfig,
    q: GaussianLrd,
    iteration: usize,
    grad_evals: u64,
}

impl PbamState {
    pub fn new(cfg: PbamConfig, init: GaussianLrd) -> Result<Self> {
        cfg.validate()?;
        if init.rank() != cfg.patch.rank {
            return Err(Error::Dimension {
                what: "initial rank",
                expected: cfg.patch.rank,
                found: init.rank(),
            });
        }
        Ok(Self {
            cfg,
            q: init,
            iteration: 0,
            grad_evals: 0,
        })
    }

    pub fn q(&self) -> &GaussianLrd {
        &self.q
    }

    pub fn into_q(self) -> GaussianLrd {
        self.q
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn grad_evals(&self) -> u64 {
        self.grad_evals
    }

    /// One iteration. A numeric breakdown in the update is retried on the
    /// same batch with the learning rate halved, up to `max_retries` times.
    pub fn step<R: Rng + ?Sized>(&mut self, target: &dyn ScoreTarget, rng: &mut R) -> Result<PbamStep> {
        let stats = bam::collect_batch(&self.q, target, self.cfg.batch_size, rng)?;
        self.grad_evals += self.cfg.batch_size as u64;
        let mut lambda_t = self.cfg.schedule.value(self.iteration);
        let mut retries = 0;
        loop {
            match pbam_update(&self.q, &stats, lambda_t, &self.cfg.patch) {
                Ok((q, report)) => {
                    self.q = q;
                    self.iteration += 1;
                    return Ok(PbamStep {
                        lambda_t,
                        retries,
                        patch: report,
                    });
                }
                Err(e) if e.is_numeric() && retries < self.cfg.max_retries => {
                    retries += 1;
                    lambda_t *= 0.5;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Full-covariance BaM run state, for small `D`.
#[derive(Clone, Debug)]
pub struct DenseBamState {
    batch_size: usize,
    schedule: LearningSchedule,
    q: DenseGaussian,
    iteration: usize,
    grad_evals: u64,
}

impl DenseBamState {
    pub fn new(batch_size: usize, schedule: LearningSchedule, init: DenseGaussian) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be at least 1".into()));
        }
        Ok(Self {
            batch_size,
            schedule,
            q: init,
            iteration: 0,
            grad_evals: 0,
        })
    }

    pub fn q(&self) -> &DenseGaussian {
        &self.q
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn grad_evals(&self) -> u64 {
        self.grad_evals
    }

    /// One iteration; returns the learning rate used.
    pub fn step<R: Rng + ?Sized>(&mut self, target: &dyn ScoreTarget, rng: &mut R) -> Result<f64> {
        if target.dim() != self.q.dim() {
            return Err(Error::Dimension {
                what: "target dimension",
                expected: self.q.dim(),
                found: target.dim(),
            });
        }
        let z = self.q.sample_columns(self.batch_size, rng)?;
        let g = target.score_columns(&z);
        bam::check_scores(&g)?;
        self.grad_evals += self.batch_size as u64;
        let stats = BatchStats::from_samples(&z, &g)?;
        let lambda_t = self.schedule.value(self.iteration);
        self.q = bam::dense_bam_step(&self.q, &stats, lambda_t)?;
        self.iteration += 1;
        Ok(lambda_t)
    }
}
