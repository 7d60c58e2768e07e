//! Command-line front end.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Parser, Subcommand};

use pbam::trace::{RunTrace, TRACE_HEADER};
use pbam::GaussianLrd;

use crate::config::{CompareConfig, RunConfig, ScaleConfig};
use crate::error::{HarnessError, Result};
use crate::run::{run, TRACE_FILE};
use crate::scale::scaling_benchmark;

pub const COMPARE_FILE: &str = "compare.csv";

#[derive(Debug, Parser)]
#[command(
    name = "pbam",
    version,
    about = "Fit low-rank-plus-diagonal Gaussian approximations and benchmark them"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one configuration; writes trace.csv and params.bin to its output_dir.
    Fit { config: PathBuf },
    /// Time the match step and one EM step over a grid of D, K and B.
    Scale { config: PathBuf },
    /// Run every [[runs]] entry with seeds derived from the master seed and
    /// merge the traces into compare.csv.
    Compare { config: PathBuf },
    /// Print the dimension, rank and summary statistics of a params file.
    Inspect { params: PathBuf },
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code: 0 on success, 1 for usage or config errors, 2 when
/// a run aborted on a numeric breakdown.
pub fn cli_main<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let result = match cli.command {
        Command::Fit { config } => fit(&config, out),
        Command::Scale { config } => scale(&config, out),
        Command::Compare { config } => compare(&config, out),
        Command::Inspect { params } => inspect(&params, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn print_last(out: &mut dyn Write, trace: &RunTrace) {
    if let Some(last) = trace.last() {
        let _ = writeln!(out, "{last}");
    }
}

fn fit(path: &Path, out: &mut dyn Write) -> Result<i32> {
    let cfg = RunConfig::load(path)?;
    cfg.seed()?;
    let dir = cfg
        .output_dir
        .clone()
        .ok_or_else(|| HarnessError::Config("`output_dir` is required for fit".into()))?;
    let (_, trace) = run(&cfg)?;
    print_last(out, &trace);
    let _ = writeln!(out, "wrote {}", dir.join(TRACE_FILE).display());
    Ok(0)
}

fn scale(path: &Path, out: &mut dyn Write) -> Result<i32> {
    let cfg = ScaleConfig::load(path)?;
    let table = scaling_benchmark(&cfg.dims, &cfg.ranks, &cfg.batches, cfg.reps, cfg.seed)?;
    table.write_csv(&cfg.output_dir)?;
    let _ = table.print(&mut *out);
    Ok(0)
}

/// Runs all entries (concurrently unless `parallel = false`), then writes
/// the merged trace with a leading `run` column. A numeric abort in any run
/// makes the exit code 2; the other runs still finish.
fn compare(path: &Path, out: &mut dyn Write) -> Result<i32> {
    let cfg = CompareConfig::load(path)?;
    let results: Vec<Mutex<Option<Result<RunTrace>>>> = cfg.runs.iter().map(|_| Mutex::new(None)).collect();
    let exec = |i: usize| {
        let r = run(&cfg.runs[i]).map(|(_, t)| t);
        *results[i].lock().unwrap() = Some(r);
    };
    if cfg.parallel {
        std::thread::scope(|s| {
            for i in 0..cfg.runs.len() {
                s.spawn(move || exec(i));
            }
        });
    } else {
        (0..cfg.runs.len()).for_each(exec);
    }

    let mut merged = format!("run,{TRACE_HEADER}\n");
    let mut code = 0;
    for (run_cfg, slot) in cfg.runs.iter().zip(results) {
        let name = run_cfg.name.as_deref().unwrap_or_default();
        let trace = match slot.into_inner().unwrap().expect("every run executes") {
            Ok(t) => t,
            Err(HarnessError::Numeric { source, trace }) => {
                let _ = writeln!(out, "{name}: numeric abort: {source}");
                code = 2;
                *trace
            }
            Err(e) => return Err(e),
        };
        for r in &trace.records {
            merged += &format!("{name},{}\n", r.csv_row());
        }
        if let Some(last) = trace.last() {
            let _ = writeln!(out, "{name}: {last}");
        }
    }
    let merged_path = cfg.output_dir.join(COMPARE_FILE);
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| HarnessError::io(&cfg.output_dir, e))?;
    std::fs::write(&merged_path, merged).map_err(|e| HarnessError::io(&merged_path, e))?;
    let _ = writeln!(out, "wrote {}", merged_path.display());
    Ok(code)
}

fn inspect(path: &Path, out: &mut dyn Write) -> Result<i32> {
    let q = GaussianLrd::load(path).map_err(|e| HarnessError::ConfigFile {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let _ = write!(out, "{}", summary(&q));
    Ok(0)
}

/// Text report printed by `inspect`.
pub fn summary(q: &GaussianLrd) -> String {
    let psi = q.psi();
    let variances = q.cov().variances();
    let logdet = q
        .logdet()
        .map(|v| format!("{v:.6e}"))
        .unwrap_or_else(|e| format!("unavailable ({e})"));
    format!(
        "dim: {}\nrank: {}\nmean: min {:.6e} max {:.6e} avg {:.6e}\npsi: min {:.6e} max {:.6e}\n\
         variance: min {:.6e} max {:.6e} trace {:.6e}\nlambda frobenius: {:.6e}\nlogdet: {logdet}\n",
        q.dim(),
        q.rank(),
        q.mu().min(),
        q.mu().max(),
        q.mu().mean(),
        psi.min(),
        psi.max(),
        variances.min(),
        variances.max(),
        q.cov().trace(),
        q.lambda().norm(),
    )
}
