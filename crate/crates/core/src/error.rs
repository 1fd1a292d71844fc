use thiserror::Error;

/// Errors raised by model construction, fitting and interval estimation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty data")]
    EmptyData,

    #[error("invalid grid axis {axis}: {reason}")]
    InvalidAxis { axis: usize, reason: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("observation {index}: {reason}")]
    InvalidObservation { index: usize, reason: String },

    #[error("observation has k = {k} responses but the design allows at most kappa = {kappa}")]
    ObservationExceedsDesign { k: u32, kappa: u32 },

    #[error("{family} mean parameter {atom} is outside the mean space")]
    Domain { family: &'static str, atom: f64 },

    #[error("observation {index} has zero likelihood at every grid atom")]
    ZeroLikelihoodRow { index: usize },

    #[error("observation {index} has zero likelihood under the mixing distribution")]
    ZeroMixtureLikelihood { index: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid mixing weights: {0}")]
    InvalidWeights(String),

    #[error("brute-force search supports at most 3 atoms, got {0}")]
    TooManyAtoms(usize),

    #[error("truncation reweighting undefined: positively weighted atoms {atoms:?} have zero response probability")]
    TruncationSingular { atoms: Vec<usize> },

    #[error("cell probabilities for atom {atom} sum to {sum}, not 1")]
    CellMassDefect { atom: usize, sum: f64 },

    #[error("invalid cell scheme: {0}")]
    InvalidCells(String),

    #[error("confidence set is empty: best attainable cell log-likelihood {best} is below threshold {threshold}")]
    Infeasible { best: f64, threshold: f64 },

    #[error("{what} did not converge after {iterations} iterations (last gap {gap:e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        gap: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("replication {index} failed: {source}")]
    Replication {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
