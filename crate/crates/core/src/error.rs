use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A small dense factorization failed. Carries enough numbers to tell a
    /// NaN-poisoned input apart from genuine ill-conditioning.
    #[error(
        "numeric breakdown in {context}: {size}x{size} factorization failed \
         (min diag {min_diag:e}, max |entry| {max_abs:e}, {non_finite} non-finite entries)"
    )]
    Factorization {
        context: &'static str,
        size: usize,
        min_diag: f64,
        max_abs: f64,
        non_finite: usize,
    },

    /// The (B+1)x(B+1) matrix under the square root in the match step has an
    /// eigenvalue that is negative beyond round-off.
    #[error(
        "numeric breakdown in match step at learning rate {lambda_t}: \
         eigenvalue {min_eigenvalue:e} below tolerance (norm {norm:e})"
    )]
    NotPositiveSemidefinite {
        lambda_t: f64,
        min_eigenvalue: f64,
        norm: f64,
    },

    #[error("target score at sample {sample} has {non_finite} non-finite coordinates")]
    NonFiniteScore { sample: usize, non_finite: usize },

    #[error("target log-density at sample {sample} is not finite")]
    NonFiniteLogDensity { sample: usize },

    #[error("target does not provide a log-density")]
    MissingLogDensity,

    #[error("{0} became non-finite")]
    NonFiniteUpdate(&'static str),

    #[error("every diagonal entry hit the floor during the patch step")]
    DegenerateDiagonal,

    #[error("patch surrogate became non-finite after {} steps", trace.len().saturating_sub(1))]
    PatchDiverged { trace: Vec<f64> },

    #[error("{path}: line {line}: cannot parse {content:?} as a timestamp")]
    EventParse { path: String, line: usize, content: String },

    #[error("{count} events fall outside the observation window (indices {indices:?})")]
    EventsOutsideWindow { count: usize, indices: Vec<usize> },

    #[error("malformed parameter file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors that signal numerical trouble in the algorithm rather
    /// than bad input or configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Factorization { .. }
                | Error::NotPositiveSemidefinite { .. }
                | Error::NonFiniteScore { .. }
                | Error::NonFiniteLogDensity { .. }
                | Error::NonFiniteUpdate(_)
                | Error::DegenerateDiagonal
                | Error::PatchDiverged { .. }
        )
    }
}
