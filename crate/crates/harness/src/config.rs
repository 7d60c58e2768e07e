//! Run, compare and scaling configurations.
//!
//! Config files are TOML: top-level keys plus `[section]` tables. See
//! `configs/README.md` for the full grammar. Relative paths inside a file
//! are resolved against the directory that contains it.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer};

use pbam::advi::LrSchedule;
use pbam::bam::ScheduleRule;

use crate::error::{HarnessError, Result};

fn parse_str<'de, D, T>(de: D) -> std::result::Result<T, D::Error>
where
    D: Deserializer<'de>,
    T: FromStr,
    T::Err: fmt::Display,
{
    let s = String::deserialize(de)?;
    s.parse().map_err(serde::de::Error::custom)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Pbam,
    BamDense,
    Advi,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Pbam => "pbam",
            Algorithm::BamDense => "bam-dense",
            Algorithm::Advi => "advi",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TargetSpec {
    /// Synthetic Gaussian with low-rank-plus-diagonal covariance.
    Gaussian { dim: usize, rank: usize, seed: u64 },
    /// GP Poisson regression on the index grid `0..n`. Counts come from
    /// `counts_file` (whitespace-separated integers) or are simulated from
    /// the prior with `seed`.
    GpPoisson {
        n: usize,
        #[serde(default = "default_length_scale")]
        length_scale: f64,
        #[serde(default = "default_true")]
        zero_mean: bool,
        #[serde(default)]
        mean_offset: f64,
        seed: Option<u64>,
        counts_file: Option<PathBuf>,
    },
    /// Binned log-Gaussian Cox process over the events in `events_file`.
    Lgcp {
        events_file: PathBuf,
        bins: usize,
        length_scale: f64,
        /// `[start, end]`; defaults to the span of the events.
        window: Option<[f64; 2]>,
        mean_offset: Option<f64>,
    },
}

impl TargetSpec {
    pub fn has_ground_truth(&self) -> bool {
        matches!(self, TargetSpec::Gaussian { .. })
    }

    fn resolve_paths(&mut self, base: &Path) {
        match self {
            TargetSpec::GpPoisson {
                counts_file: Some(p), ..
            } => *p = base.join(&*p),
            TargetSpec::Lgcp { events_file, .. } => *events_file = base.join(&*events_file),
            _ => {}
        }
    }
}

fn default_length_scale() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub lambda0: f64,
    #[serde(deserialize_with = "parse_str")]
    pub rule: ScheduleRule,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            lambda0: 1.0,
            rule: ScheduleRule::InverseTime,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchSection {
    pub eta: f64,
    pub tol: f64,
    pub max_steps: usize,
}

impl Default for PatchSection {
    fn default() -> Self {
        Self {
            eta: 1.2,
            tol: 1e-4,
            max_steps: 500,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricName {
    KlExact,
    NegElbo,
}

#[derive(Clone, Copy, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSection {
    /// Defaults to `kl-exact` for Gaussian targets and `neg-elbo` otherwise.
    pub kind: Option<MetricName>,
    pub mc_samples: usize,
    /// Record every `cadence` iterations, plus iteration 0 and the last one.
    pub cadence: usize,
}

impl Default for MetricSection {
    fn default() -> Self {
        Self {
            kind: None,
            mc_samples: 1000,
            cadence: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdviSection {
    pub lr: f64,
    #[serde(deserialize_with = "parse_str")]
    pub schedule: LrSchedule,
    pub lr_min: f64,
}

impl Default for AdviSection {
    fn default() -> Self {
        Self {
            lr: 0.01,
            schedule: LrSchedule::Linear,
            lr_min: 1e-5,
        }
    }
}

fn default_retries() -> usize {
    pbam::driver::DEFAULT_MAX_RETRIES
}

fn default_init_psi() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Label used by `compare` for the run's subdirectory and trace rows.
    pub name: Option<String>,
    pub algorithm: Algorithm,
    /// Master seed. Required for `fit`; derived per run by `compare`.
    pub seed: Option<u64>,
    pub iterations: usize,
    pub batch_size: usize,
    /// Variational rank. For `advi`, 0 selects the diagonal family.
    pub rank: usize,
    pub output_dir: Option<PathBuf>,
    /// Initial diagonal `Ψ₀ = init_psi · I`.
    #[serde(default = "default_init_psi")]
    pub init_psi: f64,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
    pub target: TargetSpec,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub patch: PatchSection,
    #[serde(default)]
    pub metric: MetricSection,
    #[serde(default)]
    pub advi: AdviSection,
}

impl RunConfig {
    /// A configuration with the default sections and no output directory.
    pub fn new(algorithm: Algorithm, target: TargetSpec, rank: usize, batch_size: usize, iterations: usize) -> Self {
        Self {
            name: None,
            algorithm,
            seed: None,
            iterations,
            batch_size,
            rank,
            output_dir: None,
            init_psi: 1.0,
            max_retries: default_retries(),
            target,
            schedule: ScheduleSection::default(),
            patch: PatchSection::default(),
            metric: MetricSection::default(),
            advi: AdviSection::default(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (mut cfg, base): (Self, _) = load_toml(path.as_ref())?;
        cfg.resolve_paths(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let Some(dir) = &mut self.output_dir {
            *dir = base.join(&*dir);
        }
        self.target.resolve_paths(base);
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| HarnessError::Config("`seed` is required".into()))
    }

    pub fn metric_name(&self) -> MetricName {
        self.metric.kind.unwrap_or(if self.target.has_ground_truth() {
            MetricName::KlExact
        } else {
            MetricName::NegElbo
        })
    }

    /// Checks everything that can be checked without building the target.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.metric.cadence == 0 {
            return bad("metric.cadence must be at least 1".into());
        }
        if self.metric.mc_samples == 0 {
            return bad("metric.mc_samples must be at least 1".into());
        }
        if !(self.init_psi > 0.0 && self.init_psi.is_finite()) {
            return bad(format!("init_psi must be positive, got {}", self.init_psi));
        }
        if self.metric_name() == MetricName::KlExact && !self.target.has_ground_truth() {
            return bad("metric kl-exact needs a Gaussian target".into());
        }
        if !(self.schedule.lambda0 > 0.0 && self.schedule.lambda0.is_finite()) {
            return bad(format!(
                "schedule.lambda0 must be positive, got {}",
                self.schedule.lambda0
            ));
        }
        match &self.target {
            TargetSpec::Gaussian { dim, rank, .. } if rank > dim || *dim == 0 => {
                return bad(format!("target rank {rank} is invalid for dimension {dim}"))
            }
            TargetSpec::GpPoisson {
                n, seed, counts_file, ..
            } => {
                if *n == 0 {
                    return bad("gp-poisson needs n >= 1".into());
                }
                if seed.is_some() == counts_file.is_some() {
                    return bad("gp-poisson needs exactly one of `seed` and `counts_file`".into());
                }
            }
            TargetSpec::Lgcp { bins: 0, .. } => return bad("lgcp needs bins >= 1".into()),
            _ => {}
        }
        let dim = self.target_dim();
        if let Some(d) = dim {
            if self.rank > d {
                return bad(format!("rank {} exceeds target dimension {d}", self.rank));
            }
        }
        if self.algorithm == Algorithm::Pbam {
            pbam::patch::PatchConfig::new(self.patch.eta, self.patch.tol, self.patch.max_steps, self.rank)
                .map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Dimension implied by the target spec, when known without reading files.
    pub fn target_dim(&self) -> Option<usize> {
        match &self.target {
            TargetSpec::Gaussian { dim, .. } => Some(*dim),
            TargetSpec::GpPoisson { n, .. } => Some(*n),
            TargetSpec::Lgcp { bins, .. } => Some(*bins),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    /// Master seed; run `i` gets [`child_seed`]`(seed, i)`.
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_true")]
    pub parallel: bool,
    pub runs: Vec<RunConfig>,
}

impl CompareConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (mut cfg, base): (Self, _) = load_toml(path.as_ref())?;
        cfg.output_dir = base.join(&cfg.output_dir);
        if cfg.runs.is_empty() {
            return Err(HarnessError::Config("compare needs at least one [[runs]] entry".into()));
        }
        let mut names = std::collections::HashSet::new();
        for (i, run) in cfg.runs.iter_mut().enumerate() {
            if run.seed.is_some() || run.output_dir.is_some() {
                return Err(HarnessError::Config(format!(
                    "run {i}: `seed` and `output_dir` are derived by compare and must not be set"
                )));
            }
            let name = run.name.get_or_insert_with(|| format!("run{i}")).clone();
            if !names.insert(name.clone()) {
                return Err(HarnessError::Config(format!("duplicate run name {name:?}")));
            }
            run.target.resolve_paths(&base);
            run.seed = Some(child_seed(cfg.seed, i));
            run.output_dir = Some(cfg.output_dir.join(&name));
            run.validate()?;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleConfig {
    pub dims: Vec<usize>,
    pub ranks: Vec<usize>,
    pub batches: Vec<usize>,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
}

fn default_reps() -> usize {
    5
}

impl ScaleConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (mut cfg, base): (Self, _) = load_toml(path.as_ref())?;
        cfg.output_dir = base.join(&cfg.output_dir);
        if cfg.dims.is_empty() || cfg.ranks.is_empty() || cfg.batches.is_empty() {
            return Err(HarnessError::Config("dims, ranks and batches must be non-empty".into()));
        }
        if cfg.reps == 0 || cfg.batches.contains(&0) || cfg.dims.contains(&0) {
            return Err(HarnessError::Config("reps, dims and batches must be positive".into()));
        }
        if let Some(k) = cfg.ranks.iter().find(|&&k| k > *cfg.dims.iter().min().unwrap()) {
            return Err(HarnessError::Config(format!("rank {k} exceeds the smallest dimension")));
        }
        Ok(cfg)
    }
}

fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<(T, PathBuf)> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::ConfigFile {
        path: path.to_path_buf(),
        message: format!("cannot read config: {e}"),
    })?;
    let cfg = toml::from_str(&text).map_err(|e| HarnessError::ConfigFile {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, base))
}

/// splitmix64 finalizer.
pub fn splitmix64(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of run `index` under master seed `master`:
/// `splitmix64(master + 0x9E3779B97F4A7C15 · (index + 1))`.
pub fn child_seed(master: u64, index: usize) -> u64 {
    splitmix64(master.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index as u64 + 1)))
}
