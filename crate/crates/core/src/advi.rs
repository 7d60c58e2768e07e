//! Reparameterization-gradient baseline: Adam on the negative ELBO over the
//! diagonal or low-rank-plus-diagonal Gaussian family.
//!
//! Samples are `z = μ + Λζ + s⊙ε` with `s = √ψ`. The data term of the gradient
//! is a Monte Carlo average of target scores; the entropy term is exact:
//! `∇_Λ ½log|Σ| = Σ⁻¹Λ` and `∇_ψ ½log|Σ| = ½ diag(Σ⁻¹)`, both by Woodbury.
//! Adam runs on `(μ, Λ, log s)`.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::bam::check_scores;
use crate::error::{Error, Result};
use crate::lowrank::{GaussianLrd, NoiseDraw, PSI_FLOOR};
use crate::targets::ScoreTarget;
use crate::trace::{RunTrace, TraceRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Diagonal,
    LowRank(usize),
}

impl Family {
    pub fn rank(self) -> usize {
        match self {
            Family::Diagonal => 0,
            Family::LowRank(k) => k,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Straight line from the initial rate down to the minimum, reached at
    /// the final iteration.
    Linear,
    Cosine,
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::InvalidParameter(format!(
                "unknown learning-rate schedule {other:?} (expected constant, linear or cosine)"
            ))),
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Constant => "constant",
            Self::Linear => "linear",
            Self::Cosine => "cosine",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdviConfig {
    pub family: Family,
    pub batch_size: usize,
    pub lr0: f64,
    pub schedule: LrSchedule,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub iterations: usize,
}

impl AdviConfig {
    /// Adam constants 0.9 / 0.999 / 1e-8 and a minimum rate of 1e-5.
    pub fn new(family: Family, batch_size: usize, lr0: f64, schedule: LrSchedule, iterations: usize) -> Self {
        Self {
            family,
            batch_size,
            lr0,
            schedule,
            lr_min: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            iterations,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be at least 1".into()));
        }
        if !(self.lr_min > 0.0 && self.lr0 > self.lr_min && self.lr0.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "need lr0 > lr_min > 0, got lr0 = {}, lr_min = {}",
                self.lr0, self.lr_min
            )));
        }
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(unit(self.beta1) && unit(self.beta2) && self.eps > 0.0) {
            return Err(Error::InvalidParameter("Adam constants out of range".into()));
        }
        Ok(())
    }

    /// Learning rate used at iteration `t` (0-based).
    pub fn lr(&self, t: usize) -> f64 {
        let last = self.iterations.saturating_sub(1);
        let frac = if last == 0 {
            1.0
        } else {
            t.min(last) as f64 / last as f64
        };
        match self.schedule {
            LrSchedule::Constant => self.lr0,
            LrSchedule::Linear => self.lr0 + (self.lr_min - self.lr0) * frac,
            LrSchedule::Cosine => {
                self.lr_min + 0.5 * (self.lr0 - self.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// Gradients of the negative ELBO estimate.
#[derive(Clone, Debug)]
pub struct ElboGradient {
    pub grad_mu: DVector<f64>,
    pub grad_lambda: DMatrix<f64>,
    pub grad_psi: DVector<f64>,
    /// Gradient with respect to `log √ψ`.
    pub grad_log_scale: DVector<f64>,
    /// `−(1/B) Σ log p(z_b) − H(q)`, when the target has a log-density.
    pub neg_elbo: Option<f64>,
}

pub fn elbo_gradient<R: Rng + ?Sized>(
    q: &GaussianLrd,
    target: &dyn ScoreTarget,
    batch_size: usize,
    rng: &mut R,
) -> Result<ElboGradient> {
    if batch_size == 0 {
        return Err(Error::InvalidParameter("batch size must be at least 1".into()));
    }
    let noise = q.draw_noise(batch_size, rng);
    elbo_gradient_with_noise(q, target, &noise)
}

/// Gradient for a fixed noise draw. Holding the noise fixed makes this the
/// exact gradient of [`neg_elbo_with_noise`].
pub fn elbo_gradient_with_noise(q: &GaussianLrd, target: &dyn ScoreTarget, noise: &NoiseDraw) -> Result<ElboGradient> {
    if target.dim() != q.dim() {
        return Err(Error::Dimension {
            what: "target dimension",
            expected: q.dim(),
            found: target.dim(),
        });
    }
    let b = noise.eps.ncols() as f64;
    let z = q.transform(noise);
    let g = target.score_columns(&z);
    check_scores(&g)?;

    let cap = q.cov().capacitance()?;
    let sinv_lambda = cap.solve(q.lambda())?;
    let inv_diag = cap.inverse_diagonal();
    let scale = q.psi().map(f64::sqrt);

    let grad_mu = -g.column_mean();
    let grad_lambda = -(&g * noise.zeta.transpose()) / b - sinv_lambda;
    let data_scale = -g.component_mul(&noise.eps).column_sum() / b;
    let grad_scale = data_scale - scale.component_mul(&inv_diag);
    let grad_psi = grad_scale.component_div(&(&scale * 2.0));
    let grad_log_scale = grad_scale.component_mul(&scale);

    let neg_elbo = match target.log_density_columns(&z) {
        Some(lp) => Some(neg_elbo_from(&lp, q)?),
        None => None,
    };
    Ok(ElboGradient {
        grad_mu,
        grad_lambda,
        grad_psi,
        grad_log_scale,
        neg_elbo,
    })
}

fn neg_elbo_from(log_p: &DVector<f64>, q: &GaussianLrd) -> Result<f64> {
    if let Some(sample) = log_p.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLogDensity { sample });
    }
    Ok(-log_p.mean() - q.entropy()?)
}

/// `−(1/B) Σ log p(z_b) − H(q)` for the samples defined by `noise`.
pub fn neg_elbo_with_noise(q: &GaussianLrd, target: &dyn ScoreTarget, noise: &NoiseDraw) -> Result<f64> {
    let z = q.transform(noise);
    let lp = target.log_density_columns(&z).ok_or(Error::MissingLogDensity)?;
    neg_elbo_from(&lp, q)
}

/// Adam state over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One descent step on `params` along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Outcome of one baseline iteration.
#[derive(Clone, Copy, Debug)]
pub struct AdviStep {
    pub lr: f64,
    /// Estimate at the parameters before the update.
    pub neg_elbo: Option<f64>,
    /// The update produced non-finite parameters and was discarded.
    pub diverged: bool,
}

/// Incremental baseline optimizer; [`adam_fit`] drives it for a full run.
#[derive(Clone, Debug)]
pub struct AdviState {
    cfg: AdviConfig,
    q: GaussianLrd,
    adam: Adam,
    iteration: usize,
    grad_evals: u64,
}

impl AdviState {
    pub fn new(cfg: AdviConfig, init: GaussianLrd) -> Result<Self> {
        cfg.validate()?;
        if init.rank() != cfg.family.rank() {
            return Err(Error::Dimension {
                what: "initial rank for the baseline family",
                expected: cfg.family.rank(),
                found: init.rank(),
            });
        }
        let n = init.dim() * (2 + init.rank());
        Ok(Self {
            adam: Adam::new(n, cfg.beta1, cfg.beta2, cfg.eps),
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

    pub fn step<R: Rng + ?Sized>(&mut self, target: &dyn ScoreTarget, rng: &mut R) -> Result<AdviStep> {
        let grad = elbo_gradient(&self.q, target, self.cfg.batch_size, rng)?;
        self.grad_evals += self.cfg.batch_size as u64;
        let lr = self.cfg.lr(self.iteration);
        self.iteration += 1;

        let (d, k) = (self.q.dim(), self.q.rank());
        let mut params = Vec::with_capacity(d * (2 + k));
        params.extend_from_slice(self.q.mu().as_slice());
        params.extend_from_slice(self.q.lambda().as_slice());
        params.extend(self.q.psi().iter().map(|p| 0.5 * p.ln()));
        let mut flat_grad = Vec::with_capacity(params.len());
        flat_grad.extend_from_slice(grad.grad_mu.as_slice());
        flat_grad.extend_from_slice(grad.grad_lambda.as_slice());
        flat_grad.extend_from_slice(grad.grad_log_scale.as_slice());
        self.adam.step(&mut params, &flat_grad, lr);

        let psi = DVector::from_iterator(d, params[d * (1 + k)..].iter().map(|u| (2.0 * u).exp().max(PSI_FLOOR)));
        // A finite log-scale can still overflow exp.
        let diverged = params.iter().chain(psi.iter()).any(|v| !v.is_finite());
        if !diverged {
            let mu = DVector::from_column_slice(&params[..d]);
            let lambda = DMatrix::from_column_slice(d, k, &params[d..d * (1 + k)]);
            self.q = GaussianLrd::new(mu, lambda, psi)?;
        }
        Ok(AdviStep {
            lr,
            neg_elbo: grad.neg_elbo,
            diverged,
        })
    }
}

/// Runs `cfg.iterations` Adam steps from `init`. The trace holds one record
/// per iteration with the negative-ELBO estimate and the cumulative number of
/// score evaluations.
pub fn adam_fit<R: Rng + ?Sized>(
    target: &dyn ScoreTarget,
    cfg: &AdviConfig,
    init: GaussianLrd,
    rng: &mut R,
) -> Result<(GaussianLrd, RunTrace)> {
    let mut state = AdviState::new(*cfg, init)?;
    let mut trace = RunTrace::default();
    let start = Instant::now();
    for _ in 0..cfg.iterations {
        let step = state.step(target, rng)?;
        trace.push(TraceRecord {
            iteration: state.iteration(),
            grad_evals: state.grad_evals(),
            metric_name: "neg-elbo-estimate".into(),
            metric_value: step.neg_elbo.unwrap_or(f64::NAN),
            em_steps: 0,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        if step.diverged {
            trace.diverged = true;
            break;
        }
    }
    Ok((state.into_q(), trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lowrank::LowRankDiag;
    use crate::targets::{synthetic_gaussian, GaussianTarget};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_q(d: usize, k: usize, rng: &mut ChaCha8Rng) -> GaussianLrd {
        let mu = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let lambda = DMatrix::from_fn(d, k, |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal));
        let psi = DVector::from_fn(d, |_, _| 0.5 + rng.random::<f64>());
        GaussianLrd::new(mu, lambda, psi).unwrap()
    }

    #[test]
    fn common_random_number_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let target = synthetic_gaussian(4, 2, &mut rng).unwrap();
        let q = random_q(4, 2, &mut rng);
        let noise = q.draw_noise(6, &mut rng);
        let grad = elbo_gradient_with_noise(&q, &target, &noise).unwrap();
        let h = 1e-5;
        let f = |mu: DVector<f64>, lambda: DMatrix<f64>, scale: DVector<f64>| {
            let q = GaussianLrd::new(mu, lambda, scale.map(|s| s * s)).unwrap();
            neg_elbo_with_noise(&q, &target, &noise).unwrap()
        };
        let check = |fd: f64, g: f64| {
            let rel = (fd - g).abs() / g.abs().max(1e-3);
            assert!(rel < 1e-4, "fd {fd} vs analytic {g}");
        };
        let scale = q.psi().map(f64::sqrt);
        for i in 0..4 {
            let (mut p, mut m) = (q.mu().clone(), q.mu().clone());
            p[i] += h;
            m[i] -= h;
            let fd = (f(p, q.lambda().clone(), scale.clone()) - f(m, q.lambda().clone(), scale.clone())) / (2.0 * h);
            check(fd, grad.grad_mu[i]);

            let (mut p, mut m) = (scale.clone(), scale.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (f(q.mu().clone(), q.lambda().clone(), p) - f(q.mu().clone(), q.lambda().clone(), m)) / (2.0 * h);
            check(fd, grad.grad_psi[i] * 2.0 * scale[i]);
            check(fd * scale[i], grad.grad_log_scale[i]);

            for j in 0..2 {
                let (mut p, mut m) = (q.lambda().clone(), q.lambda().clone());
                p[(i, j)] += h;
                m[(i, j)] -= h;
                let fd = (f(q.mu().clone(), p, scale.clone()) - f(q.mu().clone(), m, scale.clone())) / (2.0 * h);
                check(fd, grad.grad_lambda[(i, j)]);
            }
        }
    }

    /// Per-sample data-term contributions (μ, Λ, s) for standard errors.
    fn per_sample_terms(q: &GaussianLrd, target: &dyn ScoreTarget, noise: &NoiseDraw) -> Vec<Vec<f64>> {
        let z = q.transform(noise);
        let g = target.score_columns(&z);
        (0..z.ncols())
            .map(|b| {
                let gb = g.column(b);
                let mut row: Vec<f64> = gb.iter().map(|v| -v).collect();
                for j in 0..q.rank() {
                    for i in 0..q.dim() {
                        row.push(-gb[i] * noise.zeta[(j, b)]);
                    }
                }
                for i in 0..q.dim() {
                    row.push(-gb[i] * noise.eps[(i, b)]);
                }
                row
            })
            .collect()
    }

    fn flat(grad: &ElboGradient, scale: &DVector<f64>) -> Vec<f64> {
        let mut v: Vec<f64> = grad.grad_mu.iter().copied().collect();
        v.extend(grad.grad_lambda.iter());
        v.extend(grad.grad_psi.iter().zip(scale.iter()).map(|(g, s)| g * 2.0 * s));
        v
    }

    fn std_errors(rows: &[Vec<f64>]) -> Vec<f64> {
        let n = rows.len() as f64;
        (0..rows[0].len())
            .map(|c| {
                let mean = rows.iter().map(|r| r[c]).sum::<f64>() / n;
                let var = rows.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / (n - 1.0);
                (var / n).sqrt()
            })
            .collect()
    }

    #[test]
    fn self_target_gradient_is_zero_in_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let q = random_q(3, 1, &mut rng);
        let target = GaussianTarget::new(q.clone()).unwrap();
        let noise = q.draw_noise(10_000, &mut rng);
        let grad = elbo_gradient_with_noise(&q, &target, &noise).unwrap();
        let se = std_errors(&per_sample_terms(&q, &target, &noise));
        let scale = q.psi().map(f64::sqrt);
        for (i, (g, s)) in flat(&grad, &scale).iter().zip(&se).enumerate() {
            assert!(g.abs() < 5.0 * s, "coordinate {i}: {g} vs se {s}");
        }
    }

    #[test]
    fn averaged_gradient_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let target = synthetic_gaussian(3, 1, &mut rng).unwrap();
        let q = random_q(3, 1, &mut rng);
        let s_inv = target.truth().cov().to_dense().try_inverse().unwrap();
        let q_inv = q.cov().to_dense().try_inverse().unwrap();
        let diff = &s_inv - &q_inv;
        let scale = q.psi().map(f64::sqrt);
        let mut exact: Vec<f64> = (&s_inv * (q.mu() - target.truth().mu())).iter().copied().collect();
        exact.extend((&diff * q.lambda()).iter());
        exact.extend((0..3).map(|i| diff[(i, i)] * scale[i]));

        let mut runs = Vec::new();
        for seed in 0..64 {
            let mut r = ChaCha8Rng::seed_from_u64(1000 + seed);
            let grad = elbo_gradient(&q, &target, 16, &mut r).unwrap();
            runs.push(flat(&grad, &scale));
        }
        let n = runs.len() as f64;
        let se = std_errors(&runs);
        for c in 0..exact.len() {
            let mean = runs.iter().map(|r| r[c]).sum::<f64>() / n;
            assert!(
                (mean - exact[c]).abs() < 3.0 * se[c],
                "coordinate {c}: {mean} vs {}",
                exact[c]
            );
        }
    }

    #[test]
    fn diagonal_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let target = synthetic_gaussian(3, 2, &mut rng).unwrap();
        let prec = target.truth().cov().to_dense().try_inverse().unwrap();
        let optimum = GaussianLrd::new(
            target.truth().mu().clone(),
            DMatrix::zeros(3, 0),
            DVector::from_fn(3, |i, _| 1.0 / prec[(i, i)]),
        )
        .unwrap();
        let noise = optimum.draw_noise(20_000, &mut rng);
        let grad = elbo_gradient_with_noise(&optimum, &target, &noise).unwrap();
        let se = std_errors(&per_sample_terms(&optimum, &target, &noise));
        let scale = optimum.psi().map(f64::sqrt);
        for i in 0..3 {
            let g = grad.grad_psi[i] * 2.0 * scale[i];
            assert!(g.abs() < 5.0 * se[3 + i], "coordinate {i}: {g} vs se {}", se[3 + i]);
        }

        let wide = GaussianLrd::new(optimum.mu().clone(), DMatrix::zeros(3, 0), optimum.psi() * 4.0).unwrap();
        let grad = elbo_gradient_with_noise(&wide, &target, &noise).unwrap();
        assert!(grad.grad_psi.iter().all(|g| *g > 0.0));
    }

    #[test]
    fn zero_iterations_return_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let target = synthetic_gaussian(4, 1, &mut rng).unwrap();
        let init = GaussianLrd::from_cov(DVector::zeros(4), LowRankDiag::identity(4)).unwrap();
        let cfg = AdviConfig::new(Family::Diagonal, 4, 0.1, LrSchedule::Linear, 0);
        let (q, trace) = adam_fit(&target, &cfg, init.clone(), &mut rng).unwrap();
        assert_eq!(q, init);
        assert!(trace.is_empty());
    }

    #[test]
    fn overflowing_scale_is_reported_as_divergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let target = synthetic_gaussian(6, 2, &mut rng).unwrap();
        let init = GaussianLrd::from_cov(DVector::zeros(6), LowRankDiag::identity(6)).unwrap();
        let cfg = AdviConfig::new(Family::Diagonal, 4, 1e300, LrSchedule::Constant, 50);
        let mut state = AdviState::new(cfg, init).unwrap();
        let diverged = (0..50).any(|_| state.step(&target, &mut rng).unwrap().diverged);
        assert!(diverged);
    }

    #[test]
    fn schedules_hit_their_endpoints() {
        let mut cfg = AdviConfig::new(Family::LowRank(2), 4, 0.1, LrSchedule::Linear, 1000);
        assert_eq!(cfg.lr(0), 0.1);
        assert!((cfg.lr(999) - cfg.lr_min).abs() < 1e-12);
        cfg.schedule = LrSchedule::Cosine;
        assert!((cfg.lr(0) - 0.1).abs() < 1e-15);
        assert!((cfg.lr(999) - cfg.lr_min).abs() < 1e-12);
        cfg.schedule = LrSchedule::Constant;
        assert_eq!(cfg.lr(999), 0.1);
    }

    #[test]
    fn rejects_family_mismatch_and_bad_rates() {
        let init = GaussianLrd::standard(3);
        let cfg = AdviConfig::new(Family::LowRank(2), 4, 0.1, LrSchedule::Linear, 10);
        assert!(AdviState::new(cfg, init.clone()).is_err());
        let cfg = AdviConfig::new(Family::Diagonal, 4, 1e-6, LrSchedule::Linear, 10);
        assert!(AdviState::new(cfg, init).is_err());
    }

    #[test]
    fn trace_counts_gradient_evaluations() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let target = synthetic_gaussian(4, 1, &mut rng).unwrap();
        let cfg = AdviConfig::new(Family::Diagonal, 5, 0.05, LrSchedule::Constant, 7);
        let (_, trace) = adam_fit(&target, &cfg, GaussianLrd::standard(4), &mut rng).unwrap();
        let evals: Vec<u64> = trace.records.iter().map(|r| r.grad_evals).collect();
        assert_eq!(evals, vec![5, 10, 15, 20, 25, 30, 35]);
        assert!(trace.records.iter().all(|r| r.metric_value.is_finite()));
    }
}
