//! Target densities exposed through their score `∇ log p(z)`.
//!
//! Bundled targets:
//! - [`GaussianTarget`], including the random low-rank-plus-diagonal family of
//!   [`synthetic_gaussian`], which carries its ground truth for exact KL metrics;
//! - [`GpPoisson`], a latent Gaussian process on a grid with Poisson counts,
//!   which also backs the binned log-Gaussian Cox process of [`lgcp_from_events`].
//!
//! The RBF kernel is `k(x, x') = exp(−(x − x')² / (2ℓ²))` with unit amplitude.
//! Grids are in index units, so for binned event data the length-scale is
//! measured in bins.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lowrank::{Capacitance, GaussianLrd, LowRankDiag};

/// Floor on the diagonal of synthetic Gaussian targets.
pub const SYNTHETIC_PSI_FLOOR: f64 = 1e-6;

/// A target density known through its score, and optionally its unnormalized
/// log-density.
pub trait ScoreTarget: Send + Sync {
    fn dim(&self) -> usize;

    fn score(&self, z: &DVector<f64>) -> DVector<f64>;

    /// Scores of every column of `zs`, in column order. The default evaluates
    /// columns in parallel when the target is safe for concurrent use.
    fn score_columns(&self, zs: &DMatrix<f64>) -> DMatrix<f64> {
        let eval = |b: usize| self.score(&zs.column(b).into_owned());
        let cols: Vec<DVector<f64>> = if self.concurrency_safe() {
            (0..zs.ncols()).into_par_iter().map(eval).collect()
        } else {
            (0..zs.ncols()).map(eval).collect()
        };
        let mut out = DMatrix::zeros(zs.nrows(), zs.ncols());
        for (b, c) in cols.iter().enumerate() {
            out.set_column(b, c);
        }
        out
    }

    fn log_density(&self, _z: &DVector<f64>) -> Option<f64> {
        None
    }

    fn log_density_columns(&self, zs: &DMatrix<f64>) -> Option<DVector<f64>> {
        let values: Option<Vec<f64>> = zs.column_iter().map(|c| self.log_density(&c.into_owned())).collect();
        values.map(DVector::from_vec)
    }

    fn concurrency_safe(&self) -> bool {
        true
    }

    /// The exact Gaussian, for targets that are one.
    fn ground_truth(&self) -> Option<&GaussianLrd> {
        None
    }
}

/// Target defined by a score closure, with no log-density.
pub struct FnTarget<F> {
    dim: usize,
    score: F,
}

impl<F> FnTarget<F>
where
    F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync,
{
    pub fn new(dim: usize, score: F) -> Self {
        Self { dim, score }
    }
}

impl<F> ScoreTarget for FnTarget<F>
where
    F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, z: &DVector<f64>) -> DVector<f64> {
        (self.score)(z)
    }
}

/// The zero-score target used for timing the algorithm without model cost.
pub struct ZeroScore {
    pub dim: usize,
}

impl ScoreTarget for ZeroScore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, _z: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.dim)
    }

    fn score_columns(&self, zs: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::zeros(zs.nrows(), zs.ncols())
    }
}

/// Gaussian target `N(μ, ΛΛᵀ + Ψ)`.
#[derive(Clone, Debug)]
pub struct GaussianTarget {
    truth: GaussianLrd,
    cap: Capacitance,
}

impl GaussianTarget {
    pub fn new(truth: GaussianLrd) -> Result<Self> {
        let cap = truth.cov().capacitance()?;
        Ok(Self { truth, cap })
    }

    pub fn truth(&self) -> &GaussianLrd {
        &self.truth
    }

    fn centered(&self, zs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut c = zs.clone();
        for mut col in c.column_iter_mut() {
            col -= self.truth.mu();
        }
        c
    }
}

impl ScoreTarget for GaussianTarget {
    fn dim(&self) -> usize {
        self.truth.dim()
    }

    fn score(&self, z: &DVector<f64>) -> DVector<f64> {
        -self
            .cap
            .solve_vec(&(z - self.truth.mu()))
            .expect("dimension checked by caller")
    }

    fn score_columns(&self, zs: &DMatrix<f64>) -> DMatrix<f64> {
        -self.cap.solve(&self.centered(zs)).expect("dimension checked by caller")
    }

    fn log_density(&self, z: &DVector<f64>) -> Option<f64> {
        let zs = DMatrix::from_column_slice(z.len(), 1, z.as_slice());
        self.log_density_columns(&zs).map(|v| v[0])
    }

    fn log_density_columns(&self, zs: &DMatrix<f64>) -> Option<DVector<f64>> {
        let centered = self.centered(zs);
        let solved = self.cap.solve(&centered).ok()?;
        let norm = self.dim() as f64 * (2.0 * PI).ln() + self.cap.logdet();
        Some(DVector::from_iterator(
            zs.ncols(),
            centered
                .column_iter()
                .zip(solved.column_iter())
                .map(|(c, s)| -0.5 * (norm + c.dot(&s))),
        ))
    }

    fn ground_truth(&self) -> Option<&GaussianLrd> {
        Some(&self.truth)
    }
}

/// Random Gaussian target with `μᵢ ~ N(0,1)`, `ψᵢ ~ U(0,1)` (floored at
/// 1e-6) and `Λᵢⱼ ~ N(0,1)`. Draws are taken in that order, `Λ` column-major.
pub fn synthetic_gaussian<R: Rng + ?Sized>(d: usize, k: usize, rng: &mut R) -> Result<GaussianTarget> {
    if k > d {
        return Err(Error::InvalidParameter(format!(
            "target rank {k} exceeds dimension {d}"
        )));
    }
    let mu = DVector::from_fn(d, |_, _| rng.sample(StandardNormal));
    let psi = DVector::from_fn(d, |_, _| rng.random::<f64>().max(SYNTHETIC_PSI_FLOOR));
    let lambda = DMatrix::from_fn(d, k, |_, _| rng.sample(StandardNormal));
    GaussianTarget::new(GaussianLrd::from_cov(mu, LowRankDiag::new(lambda, psi)?)?)
}

/// Unit-amplitude RBF kernel matrix on `grid`.
pub fn rbf_kernel(grid: &[f64], length_scale: f64) -> DMatrix<f64> {
    let n = grid.len();
    DMatrix::from_fn(n, n, |i, j| {
        let r = (grid[i] - grid[j]) / length_scale;
        (-0.5 * r * r).exp()
    })
}

/// Grid `0, 1, …, n−1`.
pub fn index_grid(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64).collect()
}

const JITTER_REL: f64 = 1e-6;
const JITTER_RETRIES: usize = 3;

fn factor_kernel(kernel: DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = kernel.nrows();
    let mean_diag = kernel.diagonal().mean();
    let mut jitter = JITTER_REL * mean_diag;
    for _ in 0..=JITTER_RETRIES {
        let mut k = kernel.clone();
        for i in 0..n {
            k[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(k) {
            return Ok((chol, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::InvalidParameter(format!(
        "kernel matrix of size {n} is not positive definite even with jitter {:e}",
        jitter / 10.0
    )))
}

/// Latent GP on a grid with Poisson counts:
///
/// ```text
/// f ~ N(m·1, K̃),   y_n ~ Poisson(exp(f_n + o))
/// ```
///
/// with prior mean `m` and rate offset `o`. The log-density includes every
/// normalizing constant of the prior and the likelihood.
#[derive(Clone, Debug)]
pub struct GpPoisson {
    prior_chol: Cholesky<f64, Dyn>,
    counts: DVector<f64>,
    prior_mean: f64,
    rate_offset: f64,
    length_scale: f64,
    jitter: f64,
    log_norm: f64,
}

impl GpPoisson {
    pub fn new(grid: &[f64], length_scale: f64, prior_mean: f64, rate_offset: f64, counts: &[u64]) -> Result<Self> {
        if grid.len() != counts.len() {
            return Err(Error::Dimension {
                what: "count vector",
                expected: grid.len(),
                found: counts.len(),
            });
        }
        if grid.is_empty() {
            return Err(Error::InvalidParameter("GP grid must not be empty".into()));
        }
        if !(length_scale > 0.0 && length_scale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "length-scale must be positive, got {length_scale}"
            )));
        }
        if !(prior_mean.is_finite() && rate_offset.is_finite()) {
            return Err(Error::InvalidParameter(
                "prior mean and rate offset must be finite".into(),
            ));
        }
        let (prior_chol, jitter) = factor_kernel(rbf_kernel(grid, length_scale))?;
        let n = grid.len() as f64;
        let log_kernel_det = 2.0 * prior_chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let log_factorials: f64 = counts.iter().map(|&y| ln_factorial(y)).sum();
        Ok(Self {
            prior_chol,
            counts: DVector::from_iterator(counts.len(), counts.iter().map(|&y| y as f64)),
            prior_mean,
            rate_offset,
            length_scale,
            jitter,
            log_norm: -0.5 * (n * (2.0 * PI).ln() + log_kernel_det) - log_factorials,
        })
    }

    pub fn counts(&self) -> &DVector<f64> {
        &self.counts
    }

    pub fn prior_mean(&self) -> f64 {
        self.prior_mean
    }

    pub fn rate_offset(&self) -> f64 {
        self.rate_offset
    }

    pub fn length_scale(&self) -> f64 {
        self.length_scale
    }

    /// Jitter that was added to the kernel diagonal.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    fn centered(&self, fs: &DMatrix<f64>) -> DMatrix<f64> {
        fs.map(|v| v - self.prior_mean)
    }
}

fn ln_factorial(y: u64) -> f64 {
    (2..=y).map(|k| (k as f64).ln()).sum()
}

impl ScoreTarget for GpPoisson {
    fn dim(&self) -> usize {
        self.counts.len()
    }

    fn score(&self, f: &DVector<f64>) -> DVector<f64> {
        let fs = DMatrix::from_column_slice(f.len(), 1, f.as_slice());
        self.score_columns(&fs).column(0).into_owned()
    }

    fn score_columns(&self, fs: &DMatrix<f64>) -> DMatrix<f64> {
        let prior = self.prior_chol.solve(&self.centered(fs));
        let mut out = -prior;
        for (mut col, f) in out.column_iter_mut().zip(fs.column_iter()) {
            for i in 0..f.len() {
                col[i] += self.counts[i] - (f[i] + self.rate_offset).exp();
            }
        }
        out
    }

    fn log_density(&self, f: &DVector<f64>) -> Option<f64> {
        let fs = DMatrix::from_column_slice(f.len(), 1, f.as_slice());
        self.log_density_columns(&fs).map(|v| v[0])
    }

    fn log_density_columns(&self, fs: &DMatrix<f64>) -> Option<DVector<f64>> {
        let centered = self.centered(fs);
        let solved = self.prior_chol.solve(&centered);
        Some(DVector::from_iterator(
            fs.ncols(),
            (0..fs.ncols()).map(|b| {
                let f = fs.column(b);
                let lik: f64 = (0..f.len())
                    .map(|i| {
                        let eta = f[i] + self.rate_offset;
                        self.counts[i] * eta - eta.exp()
                    })
                    .sum();
                lik - 0.5 * centered.column(b).dot(&solved.column(b)) + self.log_norm
            }),
        ))
    }
}

/// GP Poisson regression target on `grid`. With `zero_mean` the prior mean is
/// zero; otherwise `mean_offset` is the constant prior mean.
pub fn gp_poisson(
    grid: &[f64],
    length_scale: f64,
    zero_mean: bool,
    mean_offset: f64,
    counts: &[u64],
) -> Result<GpPoisson> {
    let m = if zero_mean { 0.0 } else { mean_offset };
    GpPoisson::new(grid, length_scale, m, 0.0, counts)
}

/// Draws a latent function from the GP prior and Poisson counts given it.
pub fn simulate_gp_poisson<R: Rng + ?Sized>(
    grid: &[f64],
    length_scale: f64,
    prior_mean: f64,
    rng: &mut R,
) -> Result<(DVector<f64>, Vec<u64>)> {
    let (chol, _) = factor_kernel(rbf_kernel(grid, length_scale))?;
    let eps = DVector::from_fn(grid.len(), |_, _| rng.sample(StandardNormal));
    let f = (chol.l() * eps).add_scalar(prior_mean);
    let counts = f
        .iter()
        .map(|&v| {
            let rate = v.exp();
            Poisson::new(rate)
                .map(|p| p.sample(rng) as u64)
                .map_err(|e| Error::InvalidParameter(format!("Poisson rate {rate}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((f, counts))
}

/// Observation window `[start, end]` for event data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EventWindow {
    pub start: f64,
    pub end: f64,
}

impl EventWindow {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite() && start < end) {
            return Err(Error::InvalidParameter(format!("invalid window [{start}, {end}]")));
        }
        Ok(Self { start, end })
    }

    /// Smallest window containing all events.
    pub fn spanning(events: &[f64]) -> Result<Self> {
        let lo = events.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = events.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self::new(lo, hi)
    }
}

/// Counts events per equal-width bin. Bins are left-closed and right-open,
/// except the last, which also includes `window.end`.
pub fn bin_events(events: &[f64], n_bins: usize, window: EventWindow) -> Result<Vec<u64>> {
    if n_bins == 0 {
        return Err(Error::InvalidParameter("number of bins must be at least 1".into()));
    }
    let outside: Vec<usize> = events
        .iter()
        .enumerate()
        .filter(|(_, &t)| !(t >= window.start && t <= window.end))
        .map(|(i, _)| i)
        .collect();
    if !outside.is_empty() {
        return Err(Error::EventsOutsideWindow {
            count: outside.len(),
            indices: outside,
        });
    }
    let width = (window.end - window.start) / n_bins as f64;
    let mut counts = vec![0u64; n_bins];
    for &t in events {
        let idx = (((t - window.start) / width).floor() as usize).min(n_bins - 1);
        counts[idx] += 1;
    }
    Ok(counts)
}

/// `log(n_events / n_bins)`, the constant rate offset matching the average
/// count per bin.
pub fn default_mean_offset(n_events: usize, n_bins: usize) -> f64 {
    (n_events as f64 / n_bins as f64).ln()
}

/// Binned log-Gaussian Cox process: counts per bin with rate
/// `exp(f_n + m)` and a zero-mean GP prior on `f` over bin indices.
///
/// Without an explicit `mean_offset`, `m = log(#events / n_bins)`; that
/// default needs at least one event.
pub fn lgcp_from_events(
    events: &[f64],
    n_bins: usize,
    window: EventWindow,
    length_scale: f64,
    mean_offset: Option<f64>,
) -> Result<GpPoisson> {
    let counts = bin_events(events, n_bins, window)?;
    let m = match mean_offset {
        Some(m) => m,
        None if events.is_empty() => {
            return Err(Error::InvalidParameter(
                "an explicit mean offset is required when there are no events".into(),
            ))
        }
        None => default_mean_offset(events.len(), n_bins),
    };
    GpPoisson::new(&index_grid(n_bins), length_scale, 0.0, m, &counts)
}

/// Reads one timestamp per line; blank lines and lines starting with `#` are
/// skipped. Returns the timestamps sorted.
pub fn ingest_events(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut events = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line.parse::<f64>() {
            Ok(t) if t.is_finite() => events.push(t),
            _ => {
                return Err(Error::EventParse {
                    path: path.display().to_string(),
                    line: i + 1,
                    content: line.to_string(),
                })
            }
        }
    }
    events.sort_by(f64::total_cmp);
    Ok(events)
}
