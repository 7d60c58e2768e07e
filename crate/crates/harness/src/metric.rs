//! Quality metrics recorded in run traces.

use std::fmt;

use rand::Rng;

use pbam::{GaussianLrd, ScoreTarget};

use crate::config::{MetricName, RunConfig};
use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricKind {
    /// Closed-form `KL(q ‖ p)` against the target's ground truth.
    KlExact,
    /// Monte Carlo `E_q[log q − log p]` from `mc_samples` fresh draws. Equals
    /// the reverse KL up to the target's log normalizer.
    NegElbo { mc_samples: usize },
}

impl MetricKind {
    pub fn from_config(cfg: &RunConfig) -> Self {
        match cfg.metric_name() {
            MetricName::KlExact => MetricKind::KlExact,
            MetricName::NegElbo => MetricKind::NegElbo {
                mc_samples: cfg.metric.mc_samples,
            },
        }
    }
}

/// Name written to the trace, e.g. `neg-elbo(1000)`.
impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricKind::KlExact => f.write_str("kl-exact"),
            MetricKind::NegElbo { mc_samples } => write!(f, "neg-elbo({mc_samples})"),
        }
    }
}

pub fn compute_metric<R: Rng + ?Sized>(
    kind: MetricKind,
    q: &GaussianLrd,
    target: &dyn ScoreTarget,
    rng: &mut R,
) -> Result<f64> {
    let core = |e: pbam::Error| {
        if e.is_numeric() {
            HarnessError::Numeric {
                source: e,
                trace: Box::default(),
            }
        } else {
            HarnessError::Config(e.to_string())
        }
    };
    match kind {
        MetricKind::KlExact => {
            let truth = target
                .ground_truth()
                .ok_or_else(|| HarnessError::Config("kl-exact needs a target with a known Gaussian".into()))?;
            q.kl(truth).map_err(core)
        }
        MetricKind::NegElbo { mc_samples } => {
            let z = q.sample_columns(mc_samples, rng);
            let log_q = q.logpdf_columns(&z).map_err(core)?;
            let log_p = target
                .log_density_columns(&z)
                .ok_or_else(|| HarnessError::Config("neg-elbo needs a target with a log-density".into()))?;
            if let Some(sample) = log_p.iter().position(|v| !v.is_finite()) {
                return Err(core(pbam::Error::NonFiniteLogDensity { sample }));
            }
            Ok((log_q - log_p).mean())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use pbam::targets::synthetic_gaussian;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kl_of_truth_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let target = synthetic_gaussian(6, 2, &mut rng).unwrap();
        let kl = compute_metric(MetricKind::KlExact, target.truth(), &target, &mut rng).unwrap();
        assert!(kl.abs() < 1e-8);
    }

    #[test]
    fn single_sample_neg_elbo_is_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let target = synthetic_gaussian(4, 1, &mut rng).unwrap();
        let q = GaussianLrd::standard(4);
        let v = compute_metric(MetricKind::NegElbo { mc_samples: 1 }, &q, &target, &mut rng).unwrap();
        assert!(v.is_finite());
    }

    #[test]
    fn kl_without_truth_is_config_error() {
        let target = pbam::targets::ZeroScore { dim: 3 };
        let q = GaussianLrd::standard(3);
        let err = compute_metric(MetricKind::KlExact, &q, &target, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }
}
