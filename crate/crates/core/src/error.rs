use thiserror::Error;

/// Failure modes shared across the workbench.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("characteristic speed {index} at the {side} state is not real (imaginary part {imag:e})")]
    ComplexSpeeds { side: &'static str, index: usize, imag: f64 },
    #[error("characteristic speeds at the {side} state are not distinct (gap {gap:e})")]
    DegenerateSpeeds { side: &'static str, gap: f64 },
    #[error("characteristic speed {index} at the {side} state vanishes ({value:e})")]
    ZeroSpeed { side: &'static str, index: usize, value: f64 },
    #[error("endstates do not form a Lax shock: {0}")]
    NotLax(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("outgoing characteristic vectors are rank deficient")]
    RankDeficiency,
    #[error("Rankine-Hugoniot condition violated: |f(u+) - f(u-)| = {0:e}")]
    RHViolation(f64),
    #[error("profile trajectory does not connect the endstates: {0}")]
    NoConnection(String),
    #[error("tail decay rate could not be resolved: {0}")]
    TailNotResolved(String),
    #[error("solution blew up at t = {t}: sup norm {sup:e}")]
    BlowUp { t: f64, sup: f64 },
    #[error("time step violates the advective CFL bound: {0}")]
    CflViolation(String),
    #[error("dense monodromy of size {size} exceeds the memory budget {budget}")]
    MemoryBudgetExceeded { size: usize, budget: usize },
    #[error("eigensolver failed: {0}")]
    EigensolverFailure(String),
    #[error("spatial eigenvalue branch ambiguous: |sigma| = {sigma_abs} >= a^2/4 = {limit}")]
    BranchAmbiguity { sigma_abs: f64, limit: f64 },
    #[error("Fourier coupling band {band} exceeds the truncation K = {k}")]
    TruncationBandExceeded { band: usize, k: usize },
    #[error("stable/unstable splitting collapsed: gap {0:e}")]
    SplittingCollapse(f64),
    #[error("subspace transport failed: {0}")]
    StiffnessFailure(String),
    #[error("quadrature under-resolved: {0}")]
    QuadratureUnderResolved(String),
    #[error("quadrature budget exceeded: {0}")]
    QuadratureBudgetExceeded(String),
    #[error("least-squares fit ill-conditioned: {0}")]
    FitIllConditioned(String),
    #[error("template region is empty")]
    EmptyRegion,
    #[error("phase fit lost the profile family: {0}")]
    FitLost(String),
    #[error("insufficient horizon: {0}")]
    InsufficientHorizon(String),
    #[error("green table coverage insufficient: {0}")]
    TableCoverageInsufficient(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, Error>;
