use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("design matrix is rank deficient on the weighted sample")]
    SingularDesign,
    #[error("separation detected: {0}")]
    Separation(String),
    #[error("no convergence after {iterations} iterations (last change {last_change:e})")]
    NoConvergence { iterations: usize, last_change: f64 },
    #[error("stratum `{0}` has a single PSU")]
    LonelyPsu(String),
    #[error("feature mismatch: {0}")]
    FeatureMismatch(String),
    #[error("model mismatch: {0}")]
    ModelMismatch(String),
    #[error("positivity violated: {count} record(s) with propensity below floor {floor} (min {min:e})")]
    PositivityViolation { count: usize, floor: f64, min: f64 },
    #[error("invalid working correlation {alpha} for cluster size {k}")]
    InvalidCorrelation { alpha: f64, k: usize },
    #[error("first-stage covariance unavailable")]
    MissingFirstStageCovariance,
    #[error("outcomes are degenerate: need at least one positive and one negative")]
    DegenerateOutcomes,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid scenario: {0}")]
    SpecInvalid(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("encoding mismatch: {0}")]
    EncodingMismatch(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("{module}: {source}")]
    Module {
        module: &'static str,
        source: Box<Error>,
    },
}

impl Error {
    /// True for failures of the numerical routines, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        if let Error::Module { source, .. } = self {
            return source.is_numerical();
        }
        matches!(
            self,
            Error::SingularDesign
                | Error::Separation(_)
                | Error::NoConvergence { .. }
                | Error::InvalidCorrelation { .. }
                | Error::PositivityViolation { .. }
        )
    }
}

/// Prefixes errors with the module that raised them.
pub trait Context<T> {
    fn within(self, module: &'static str) -> Result<T>;
}

impl<T> Context<T> for Result<T> {
    fn within(self, module: &'static str) -> Result<T> {
        self.map_err(|e| Error::Module {
            module,
            source: Box::new(e),
        })
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Schema(e.to_string())
    }
}
