use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} at column {column})")]
    NotPositiveDefinite { column: usize, pivot: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("eigenvalue iteration did not converge")]
    NonConvergence,

    #[error("matrix is not similar to a symmetric matrix")]
    NotSymmetrizable,

    #[error("value outside support: {0}")]
    OutOfSupport(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("adjacency is not symmetric: {0} lists {1} but not the reverse")]
    Asymmetry(String, String),

    #[error("region {0} has no neighbours")]
    Island(String),

    #[error("structure matrix is indefinite (eigenvalue {0})")]
    IndefiniteStructure(f64),

    #[error("proper Besag diagonal shift must be positive, got {0}")]
    NonPositiveD(f64),

    #[error("parameter out of range: {0}")]
    OutOfRange(String),

    #[error("unsupported likelihood family: {0}")]
    UnsupportedFamily(String),

    #[error("non-finite linear predictor at observation {0}")]
    NonFiniteEta(usize),

    #[error("Newton iteration diverged after {0} iterations")]
    NewtonDivergence(usize),

    #[error("hyperparameter mode search failed: {0}")]
    ModeSearchFailure(String),

    #[error("too many free hyperparameters for grid exploration ({0} > 3)")]
    GridOverflow(usize),

    #[error("latent index {0} was not tracked at fit time")]
    IndexNotTracked(usize),

    #[error("non-finite value in acceptance ratio")]
    NonFinite,

    #[error("invalid chain configuration: {0}")]
    InvalidConfig(String),

    #[error("conditional fit failed at theta_c = {theta:?}: {source}")]
    FitFailed {
        theta: Vec<f64>,
        #[source]
        source: Box<Error>,
    },

    #[error("chain is empty")]
    EmptyChain,

    #[error("empty list of marginals")]
    EmptyList,

    #[error("density grid is not normalised (mass {0})")]
    Unnormalized(f64),

    #[error("zero scale in affine transform")]
    ZeroScale,

    #[error("covariate not found: {0}")]
    CovariateNotFound(String),

    #[error("delta must be positive, got {0}")]
    NonPositiveDelta(f64),

    #[error("quadrature refinement disagrees by {0:e}")]
    GridTooCoarse(f64),

    #[error("parameter names do not match: {0}")]
    NameMismatch(String),

    #[error("invalid marginal grid: {0}")]
    InvalidGrid(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for failures of the numerical machinery (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NotPositiveDefinite { .. }
            | Error::NonConvergence
            | Error::NewtonDivergence(_)
            | Error::ModeSearchFailure(_)
            | Error::NonFinite
            | Error::NonFiniteEta(_)
            | Error::GridTooCoarse(_) => true,
            Error::FitFailed { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
