use thiserror::Error;

/// Errors raised by the reduced order modelling pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("solution blew up at step {step} (t = {time})")]
    BlowUp { step: usize, time: f64 },
    #[error("Picard iteration stagnated after {iterations} iterations (last update {last:.3e})")]
    Stagnation { iterations: usize, last: f64, history: Vec<f64> },
    #[error("empty POD basis: all snapshots vanish")]
    EmptyBasis,
    #[error("snapshot Gram matrix is not positive semi-definite (eigenvalue {0:.3e})")]
    Conditioning(f64),
    #[error("no oscillation period detectable in the energy signal; supply one explicitly")]
    PeriodNotFound,
    #[error("malformed file: {0}")]
    Format(String),
    #[error("schema error: column `{0}`")]
    Schema(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::BlowUp { .. } | Error::Stagnation { .. } | Error::Conditioning(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
