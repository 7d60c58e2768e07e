//! Per-iteration run records.

use std::fmt;
use std::io::Write;

/// One row of a run trace. `iteration` counts completed updates; the row for
/// iteration 0 describes the initialization.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub grad_evals: u64,
    pub metric_name: String,
    pub metric_value: f64,
    pub em_steps: usize,
    pub wall_seconds: f64,
}

pub const TRACE_HEADER: &str = "iteration,grad_evals,metric_name,metric_value,em_steps,wall_seconds";

impl TraceRecord {
    /// CSV row without the trailing newline. Values use Rust's shortest
    /// round-trip formatting, so identical runs give identical bytes.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:e},{},{:.6}",
            self.iteration, self.grad_evals, self.metric_name, self.metric_value, self.em_steps, self.wall_seconds
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunTrace {
    pub records: Vec<TraceRecord>,
    /// Set when the run stopped because its parameters became non-finite.
    pub diverged: bool,
}

impl RunTrace {
    pub fn push(&mut self, record: TraceRecord) {
        self.records.push(record);
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{TRACE_HEADER}")?;
        for r in &self.records {
            writeln!(out, "{}", r.csv_row())?;
        }
        Ok(())
    }
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "iter {:>6}  evals {:>8}  {} {:.6e}  em {:>3}",
            self.iteration, self.grad_evals, self.metric_name, self.metric_value, self.em_steps
        )
    }
}
