//! End-to-end runs: target construction, the iteration loop, metric cadence,
//! incremental trace output and fitted-parameter files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pbam::advi::{AdviConfig, AdviState, Family};
use pbam::bam::{DenseGaussian, LearningSchedule};
use pbam::driver::{initial_q, DenseBamState, PbamConfig, PbamState};
use pbam::patch::PatchConfig;
use pbam::targets::{
    gp_poisson, index_grid, ingest_events, lgcp_from_events, simulate_gp_poisson, synthetic_gaussian, EventWindow,
};
use pbam::trace::{RunTrace, TraceRecord, TRACE_HEADER};
use pbam::{GaussianLrd, ScoreTarget};

use crate::config::{Algorithm, RunConfig, TargetSpec};
use crate::error::{HarnessError, Result};
use crate::metric::{compute_metric, MetricKind};

pub const TRACE_FILE: &str = "trace.csv";
pub const PARAMS_FILE: &str = "params.bin";

/// Builds the target described by `spec`. Synthetic targets draw from their
/// own seeded stream, independent of the run seed.
pub fn build_target(spec: &TargetSpec) -> Result<Box<dyn ScoreTarget>> {
    let cfg_err = |e: pbam::Error| HarnessError::Config(e.to_string());
    Ok(match spec {
        TargetSpec::Gaussian { dim, rank, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            Box::new(synthetic_gaussian(*dim, *rank, &mut rng).map_err(cfg_err)?)
        }
        TargetSpec::GpPoisson {
            n,
            length_scale,
            zero_mean,
            mean_offset,
            seed,
            counts_file,
        } => {
            let grid = index_grid(*n);
            let counts = match (seed, counts_file) {
                (Some(seed), None) => {
                    let prior_mean = if *zero_mean { 0.0 } else { *mean_offset };
                    let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                    simulate_gp_poisson(&grid, *length_scale, prior_mean, &mut rng)
                        .map_err(cfg_err)?
                        .1
                }
                (None, Some(path)) => read_counts(path, *n)?,
                _ => {
                    return Err(HarnessError::Config(
                        "gp-poisson needs exactly one of `seed` and `counts_file`".into(),
                    ))
                }
            };
            Box::new(gp_poisson(&grid, *length_scale, *zero_mean, *mean_offset, &counts).map_err(cfg_err)?)
        }
        TargetSpec::Lgcp {
            events_file,
            bins,
            length_scale,
            window,
            mean_offset,
        } => {
            let events = ingest_events(events_file).map_err(cfg_err)?;
            let window = match window {
                Some([a, b]) => EventWindow::new(*a, *b),
                None => EventWindow::spanning(&events),
            }
            .map_err(cfg_err)?;
            Box::new(lgcp_from_events(&events, *bins, window, *length_scale, *mean_offset).map_err(cfg_err)?)
        }
    })
}

fn read_counts(path: &Path, n: usize) -> Result<Vec<u64>> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let counts = text
        .split_whitespace()
        .map(|tok| {
            tok.parse::<u64>().map_err(|_| HarnessError::ConfigFile {
                path: path.to_path_buf(),
                message: format!("{tok:?} is not a non-negative integer count"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if counts.len() != n {
        return Err(HarnessError::ConfigFile {
            path: path.to_path_buf(),
            message: format!("expected {n} counts, found {}", counts.len()),
        });
    }
    Ok(counts)
}

/// Run stream (stream 0) and metric stream (stream 1) of the ChaCha8
/// generator keyed by `seed`, so metric sampling never perturbs the run.
pub fn seeded_streams(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let run = ChaCha8Rng::seed_from_u64(seed);
    let mut metric = ChaCha8Rng::seed_from_u64(seed);
    metric.set_stream(1);
    (run, metric)
}

fn initial_state(cfg: &RunConfig, d: usize, rank: usize, rng: &mut ChaCha8Rng) -> Result<GaussianLrd> {
    let q = initial_q(d, rank, rng).map_err(|e| HarnessError::Config(e.to_string()))?;
    if cfg.init_psi == 1.0 {
        return Ok(q);
    }
    let (mu, cov) = q.into_parts();
    let (lambda, _) = cov.into_parts();
    GaussianLrd::new(mu, lambda, DVector::from_element(d, cfg.init_psi))
        .map_err(|e| HarnessError::Config(e.to_string()))
}

/// Records metrics at the configured cadence and streams them to disk.
struct Recorder<'a> {
    kind: MetricKind,
    cadence: usize,
    last: usize,
    target: &'a dyn ScoreTarget,
    rng: ChaCha8Rng,
    out: Option<(PathBuf, BufWriter<File>)>,
    trace: RunTrace,
    start: Instant,
    metric_time: Duration,
}

impl<'a> Recorder<'a> {
    fn new(cfg: &RunConfig, target: &'a dyn ScoreTarget, rng: ChaCha8Rng) -> Result<Self> {
        let out = match &cfg.output_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
                let path = dir.join(TRACE_FILE);
                let file = File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
                let mut w = BufWriter::new(file);
                writeln!(w, "{TRACE_HEADER}")
                    .and_then(|_| w.flush())
                    .map_err(|e| HarnessError::io(&path, e))?;
                Some((path, w))
            }
            None => None,
        };
        Ok(Self {
            kind: MetricKind::from_config(cfg),
            cadence: cfg.metric.cadence,
            last: cfg.iterations,
            target,
            rng,
            out,
            trace: RunTrace::default(),
            start: Instant::now(),
            metric_time: Duration::ZERO,
        })
    }

    fn due(&self, t: usize) -> bool {
        t == 0 || t == self.last || t % self.cadence == 0
    }

    fn record(&mut self, iteration: usize, grad_evals: u64, q: &GaussianLrd, em_steps: usize) -> Result<()> {
        let before = Instant::now();
        let wall = before.duration_since(self.start) - self.metric_time;
        let value = compute_metric(self.kind, q, self.target, &mut self.rng).map_err(|e| self.attach(e))?;
        self.metric_time += before.elapsed();
        let rec = TraceRecord {
            iteration,
            grad_evals,
            metric_name: self.kind.to_string(),
            metric_value: value,
            em_steps,
            wall_seconds: wall.as_secs_f64(),
        };
        if let Some((path, w)) = &mut self.out {
            writeln!(w, "{}", rec.csv_row())
                .and_then(|_| w.flush())
                .map_err(|e| HarnessError::io(path.as_path(), e))?;
        }
        self.trace.push(rec);
        Ok(())
    }

    fn attach(&self, err: HarnessError) -> HarnessError {
        match err {
            HarnessError::Numeric { source, .. } => HarnessError::Numeric {
                source,
                trace: Box::new(self.trace.clone()),
            },
            other => other,
        }
    }

    fn abort(&mut self, err: pbam::Error) -> HarnessError {
        if err.is_numeric() {
            self.trace.diverged = true;
        }
        HarnessError::from_core(err, &self.trace)
    }

    fn finish(self, q: &GaussianLrd) -> Result<RunTrace> {
        if let Some((path, mut w)) = self.out {
            w.flush().map_err(|e| HarnessError::io(&path, e))?;
            let params = path.with_file_name(PARAMS_FILE);
            q.save(&params)
                .map_err(|e| HarnessError::Config(format!("{}: {e}", params.display())))?;
        }
        Ok(self.trace)
    }
}

/// Batch-match-patch run. `T = 0` returns the initialization and an empty
/// trace. On a numeric breakdown that survives the retries the run aborts;
/// the trace written so far stays on disk and travels in the error.
pub fn run_pbam(cfg: &RunConfig) -> Result<(GaussianLrd, RunTrace)> {
    cfg.validate()?;
    let target = build_target(&cfg.target)?;
    run_pbam_on(cfg, target.as_ref())
}

/// [`run_pbam`] against an already-built target.
pub fn run_pbam_on(cfg: &RunConfig, target: &dyn ScoreTarget) -> Result<(GaussianLrd, RunTrace)> {
    let (mut rng, metric_rng) = seeded_streams(cfg.seed()?);
    let init = initial_state(cfg, target.dim(), cfg.rank, &mut rng)?;
    let schedule = LearningSchedule::new(cfg.schedule.lambda0, cfg.schedule.rule)
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let patch = PatchConfig::new(cfg.patch.eta, cfg.patch.tol, cfg.patch.max_steps, cfg.rank)
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let mut pcfg = PbamConfig::new(cfg.batch_size, schedule, patch);
    pcfg.max_retries = cfg.max_retries;
    let mut state = PbamState::new(pcfg, init).map_err(|e| HarnessError::Config(e.to_string()))?;
    if cfg.iterations == 0 {
        return Ok((state.into_q(), RunTrace::default()));
    }
    let mut rec = Recorder::new(cfg, target, metric_rng)?;
    rec.record(0, 0, state.q(), 0)?;
    for t in 1..=cfg.iterations {
        let step = state.step(target, &mut rng).map_err(|e| rec.abort(e))?;
        if rec.due(t) {
            rec.record(t, state.grad_evals(), state.q(), step.patch.steps_taken)?;
        }
    }
    let trace = rec.finish(state.q())?;
    Ok((state.into_q(), trace))
}

/// Full-covariance BaM run from the same initialization as [`run_pbam`].
/// Metrics are computed on an exact low-rank-plus-diagonal rewrite of the
/// dense covariance.
pub fn run_bam_dense(cfg: &RunConfig) -> Result<(DenseGaussian, RunTrace)> {
    cfg.validate()?;
    let target = build_target(&cfg.target)?;
    let target = target.as_ref();
    let (mut rng, metric_rng) = seeded_streams(cfg.seed()?);
    let init = initial_state(cfg, target.dim(), cfg.rank, &mut rng)?;
    let schedule = LearningSchedule::new(cfg.schedule.lambda0, cfg.schedule.rule)
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let mut state = DenseBamState::new(cfg.batch_size, schedule, DenseGaussian::from_lrd(&init))
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    if cfg.iterations == 0 {
        return Ok((state.q().clone(), RunTrace::default()));
    }
    let mut rec = Recorder::new(cfg, target, metric_rng)?;
    rec.record(0, 0, &init, 0)?;
    let mut current = init;
    for t in 1..=cfg.iterations {
        state.step(target, &mut rng).map_err(|e| rec.abort(e))?;
        if rec.due(t) {
            current = state.q().to_lrd().map_err(|e| rec.abort(e))?;
            rec.record(t, state.grad_evals(), &current, 0)?;
        }
    }
    let trace = rec.finish(&current)?;
    Ok((state.q().clone(), trace))
}

/// Reparameterization-gradient baseline with Adam.
pub fn run_advi(cfg: &RunConfig) -> Result<(GaussianLrd, RunTrace)> {
    cfg.validate()?;
    let target = build_target(&cfg.target)?;
    run_advi_on(cfg, target.as_ref())
}

/// [`run_advi`] against an already-built target.
pub fn run_advi_on(cfg: &RunConfig, target: &dyn ScoreTarget) -> Result<(GaussianLrd, RunTrace)> {
    let (mut rng, metric_rng) = seeded_streams(cfg.seed()?);
    let family = if cfg.rank == 0 {
        Family::Diagonal
    } else {
        Family::LowRank(cfg.rank)
    };
    let mut acfg = AdviConfig::new(family, cfg.batch_size, cfg.advi.lr, cfg.advi.schedule, cfg.iterations);
    acfg.lr_min = cfg.advi.lr_min;
    let init = initial_state(cfg, target.dim(), cfg.rank, &mut rng)?;
    let mut state = AdviState::new(acfg, init).map_err(|e| HarnessError::Config(e.to_string()))?;
    if cfg.iterations == 0 {
        return Ok((state.into_q(), RunTrace::default()));
    }
    let mut rec = Recorder::new(cfg, target, metric_rng)?;
    rec.record(0, 0, state.q(), 0)?;
    for t in 1..=cfg.iterations {
        let step = state.step(target, &mut rng).map_err(|e| rec.abort(e))?;
        if step.diverged {
            return Err(rec.abort(pbam::Error::NonFiniteUpdate("baseline parameters")));
        }
        if rec.due(t) {
            rec.record(t, state.grad_evals(), state.q(), 0)?;
        }
    }
    let trace = rec.finish(state.q())?;
    Ok((state.into_q(), trace))
}

/// Fitted approximation from any algorithm.
#[derive(Clone, Debug)]
pub enum Fitted {
    LowRank(GaussianLrd),
    Dense(DenseGaussian),
}

/// Dispatches on `cfg.algorithm`.
pub fn run(cfg: &RunConfig) -> Result<(Fitted, RunTrace)> {
    match cfg.algorithm {
        Algorithm::Pbam => run_pbam(cfg).map(|(q, t)| (Fitted::LowRank(q), t)),
        Algorithm::BamDense => run_bam_dense(cfg).map(|(q, t)| (Fitted::Dense(q), t)),
        Algorithm::Advi => run_advi(cfg).map(|(q, t)| (Fitted::LowRank(q), t)),
    }
}
