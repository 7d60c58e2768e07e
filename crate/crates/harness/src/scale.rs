//! Wall-time scaling of the match step and a single EM step.
//!
//! Scores come from the zero-score dummy target, so only the update itself is
//! timed. Each cell reports the median over `reps` timed repetitions after
//! one untimed warm-up.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pbam::bam::{collect_batch, match_step};
use pbam::driver::initial_q;
use pbam::patch::em_step;
use pbam::targets::ZeroScore;

use crate::error::{HarnessError, Result};

pub const CELLS_FILE: &str = "scaling.csv";
pub const SLOPES_FILE: &str = "scaling_slopes.csv";

/// Momentum used for the timed EM step.
const EM_ETA: f64 = 1.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StepKind {
    Bam,
    Em,
}

impl fmt::Display for StepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StepKind::Bam => "bam",
            StepKind::Em => "em",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    Dim,
    Rank,
    Batch,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Dim => "dim",
            Axis::Rank => "rank",
            Axis::Batch => "batch",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleCell {
    pub step: StepKind,
    pub dim: usize,
    pub rank: usize,
    pub batch: usize,
    pub median_seconds: f64,
    pub reps: usize,
}

impl ScaleCell {
    fn coord(&self, axis: Axis) -> usize {
        match axis {
            Axis::Dim => self.dim,
            Axis::Rank => self.rank,
            Axis::Batch => self.batch,
        }
    }
}

/// Least-squares slope of `log(time)` against `log(axis)` with the other two
/// axes held at `fixed` (in dim, rank, batch order, skipping `axis`).
#[derive(Clone, Debug, PartialEq)]
pub struct SlopeFit {
    pub step: StepKind,
    pub axis: Axis,
    pub fixed: (usize, usize),
    pub slope: f64,
    pub points: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScalingTable {
    pub cells: Vec<ScaleCell>,
    pub slopes: Vec<SlopeFit>,
}

impl ScalingTable {
    pub fn slope(&self, step: StepKind, axis: Axis) -> Option<&SlopeFit> {
        self.slopes.iter().find(|s| s.step == step && s.axis == axis)
    }

    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        let write = |name: &str, body: String| {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| HarnessError::io(path, e))
        };
        let mut cells = String::from("step,dim,rank,batch,median_seconds,reps\n");
        for c in &self.cells {
            cells += &format!(
                "{},{},{},{},{:e},{}\n",
                c.step, c.dim, c.rank, c.batch, c.median_seconds, c.reps
            );
        }
        write(CELLS_FILE, cells)?;
        let mut slopes = String::from("step,axis,fixed_a,fixed_b,slope,points\n");
        for s in &self.slopes {
            slopes += &format!(
                "{},{},{},{},{},{}\n",
                s.step, s.axis, s.fixed.0, s.fixed.1, s.slope, s.points
            );
        }
        write(SLOPES_FILE, slopes)
    }

    pub fn print(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(
            out,
            "{:>4} {:>7} {:>5} {:>5} {:>14}",
            "step", "D", "K", "B", "median [s]"
        )?;
        for c in &self.cells {
            writeln!(
                out,
                "{:>4} {:>7} {:>5} {:>5} {:>14.6e}",
                c.step, c.dim, c.rank, c.batch, c.median_seconds
            )?;
        }
        for s in &self.slopes {
            writeln!(
                out,
                "slope {} vs {} at {:?}: {:.3} ({} points)",
                s.step, s.axis, s.fixed, s.slope, s.points
            )?;
        }
        Ok(())
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn time_reps(reps: usize, mut f: impl FnMut() -> pbam::Result<()>) -> pbam::Result<f64> {
    f()?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(median(times))
}

/// Ordinary least squares slope of `ys` on `xs`.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn slope_fits(cells: &[ScaleCell]) -> Vec<SlopeFit> {
    let mut fits = Vec::new();
    for step in [StepKind::Bam, StepKind::Em] {
        for axis in [Axis::Dim, Axis::Rank, Axis::Batch] {
            let others: Vec<Axis> = [Axis::Dim, Axis::Rank, Axis::Batch]
                .into_iter()
                .filter(|a| *a != axis)
                .collect();
            let mut groups: Vec<((usize, usize), Vec<&ScaleCell>)> = Vec::new();
            for c in cells.iter().filter(|c| c.step == step) {
                let key = (c.coord(others[0]), c.coord(others[1]));
                match groups.iter_mut().find(|(k, _)| *k == key) {
                    Some((_, g)) => g.push(c),
                    None => groups.push((key, vec![c])),
                }
            }
            for (fixed, group) in groups {
                if group.len() < 2 {
                    continue;
                }
                let xs: Vec<f64> = group.iter().map(|c| (c.coord(axis) as f64).ln()).collect();
                let ys: Vec<f64> = group.iter().map(|c| c.median_seconds.max(1e-12).ln()).collect();
                fits.push(SlopeFit {
                    step,
                    axis,
                    fixed,
                    slope: fit_slope(&xs, &ys),
                    points: group.len(),
                });
            }
        }
    }
    fits
}

/// Times the match step and one EM step for every `(D, K, B)` combination.
pub fn scaling_benchmark(
    dims: &[usize],
    ranks: &[usize],
    batches: &[usize],
    reps: usize,
    seed: u64,
) -> Result<ScalingTable> {
    let numeric = |e: pbam::Error| HarnessError::from_core(e, &Default::default());
    if reps == 0 {
        return Err(HarnessError::Config("reps must be at least 1".into()));
    }
    let mut cells = Vec::new();
    for &d in dims {
        for &k in ranks {
            for &b in batches {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let q = initial_q(d, k, &mut rng).map_err(numeric)?;
                let target = ZeroScore { dim: d };
                let stats = collect_batch(&q, &target, b, &mut rng).map_err(numeric)?;
                let bam = time_reps(reps, || match_step(&q, &stats, 1.0).map(drop)).map_err(numeric)?;
                let sigma = match_step(&q, &stats, 1.0).map_err(numeric)?;
                let em = time_reps(reps, || em_step(&sigma, q.cov(), EM_ETA).map(drop)).map_err(numeric)?;
                for (step, t) in [(StepKind::Bam, bam), (StepKind::Em, em)] {
                    cells.push(ScaleCell {
                        step,
                        dim: d,
                        rank: k,
                        batch: b,
                        median_seconds: t,
                        reps,
                    });
                }
            }
        }
    }
    let slopes = slope_fits(&cells);
    Ok(ScalingTable { cells, slopes })
}
