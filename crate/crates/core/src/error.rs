use thiserror::Error;

use crate::lpoly::Side;

pub type Result<T> = std::result::Result<T, RdError>;

/// Every failure the toolkit can report.
///
/// Variants are grouped by how the command line reports them: data and
/// configuration problems map to exit code 2, numerical problems to 3.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum RdError {
    // ---- data / configuration ----
    #[error("column `{0}` not found in input")]
    MissingColumn(String),
    #[error("non-finite or missing score at row {row}")]
    NonFiniteScore { row: usize },
    #[error("non-finite or missing outcome at row {row}")]
    NonFiniteOutcome { row: usize },
    #[error("treatment value at row {row} is not 0 or 1")]
    BadTreatmentCode { row: usize },
    #[error("non-finite cutoff at row {row}")]
    NonFiniteCutoff { row: usize },
    #[error("input has no rows")]
    EmptyInput,
    #[error("vector `{name}` has length {got}, expected {expected}")]
    LengthMismatch { name: String, expected: usize, got: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("received-treatment column required but absent")]
    MissingTreatmentColumn,
    #[error("per-unit cutoffs required but absent")]
    MissingUnitCutoffs,
    #[error("covariate `{0}` not present in sample")]
    MissingCovariate(String),
    #[error("at least one covariate is required")]
    NoCovariates,
    #[error("placebo grid contains the true cutoff {0}")]
    GridContainsTrueCutoff(f64),
    #[error("bad simulation spec: {0}")]
    BadSpec(String),

    // ---- numerical / estimation ----
    #[error("no observations with positive weight on the {0} side")]
    EmptySide(Side),
    #[error("rank-deficient design on the {side} side (n_eff = {n_eff}, order {p})")]
    RankDeficient { side: Side, n_eff: usize, p: usize },
    #[error("derivative order {nu} exceeds polynomial order {p}")]
    DerivativeOrderTooHigh { nu: usize, p: usize },
    #[error("first stage {first_stage:.4} is below the weak-instrument threshold")]
    WeakFirstStage { first_stage: f64 },
    #[error("no mass point at the cutoff")]
    NoMassAtCutoff,
    #[error("no mass point below the cutoff")]
    NoBelowNeighbor,
    #[error("too few observations: {0}")]
    TooFewObservations(String),
    #[error("an assignment group inside the window is empty")]
    EmptyGroup,
    #[error("no candidate window has at least two units per side")]
    NoFeasibleWindow,
    #[error("variable `{0}` has no variation")]
    NoVariation(String),
    #[error("insufficient data on the relevant side for placebo cutoff {0}")]
    InsufficientSideData(f64),
    #[error("insufficient data after excluding radius {0}")]
    InsufficientData(f64),
    #[error("too many failed replications: {failed} of {total}")]
    TooManyFailures { failed: usize, total: usize },
    #[error("target cannot be reached: {0}")]
    UnreachableTarget(String),
}

impl RdError {
    /// Short machine-readable error name.
    pub fn code(&self) -> &'static str {
        use RdError::*;
        match self {
            MissingColumn(_) => "MissingColumn",
            NonFiniteScore { .. } => "NonFiniteScore",
            NonFiniteOutcome { .. } => "NonFiniteOutcome",
            BadTreatmentCode { .. } => "BadTreatmentCode",
            NonFiniteCutoff { .. } => "NonFiniteCutoff",
            EmptyInput => "EmptyInput",
            LengthMismatch { .. } => "LengthMismatch",
            InvalidArgument(_) => "InvalidArgument",
            Io(_) => "Io",
            MissingTreatmentColumn => "MissingTreatmentColumn",
            MissingUnitCutoffs => "MissingUnitCutoffs",
            MissingCovariate(_) => "MissingCovariate",
            NoCovariates => "NoCovariates",
            GridContainsTrueCutoff(_) => "GridContainsTrueCutoff",
            BadSpec(_) => "BadSpec",
            EmptySide(_) => "EmptySide",
            RankDeficient { .. } => "RankDeficient",
            DerivativeOrderTooHigh { .. } => "DerivativeOrderTooHigh",
            WeakFirstStage { .. } => "WeakFirstStage",
            NoMassAtCutoff => "NoMassAtCutoff",
            NoBelowNeighbor => "NoBelowNeighbor",
            TooFewObservations(_) => "TooFewObservations",
            EmptyGroup => "EmptyGroup",
            NoFeasibleWindow => "NoFeasibleWindow",
            NoVariation(_) => "NoVariation",
            InsufficientSideData(_) => "InsufficientSideData",
            InsufficientData(_) => "InsufficientData",
            TooManyFailures { .. } => "TooManyFailures",
            UnreachableTarget(_) => "UnreachableTarget",
        }
    }

    /// True for errors caused by the input data or configuration rather
    /// than by the numerics.
    pub fn is_data_error(&self) -> bool {
        use RdError::*;
        matches!(
            self,
            MissingColumn(_)
                | NonFiniteScore { .. }
                | NonFiniteOutcome { .. }
                | BadTreatmentCode { .. }
                | NonFiniteCutoff { .. }
                | EmptyInput
                | LengthMismatch { .. }
                | InvalidArgument(_)
                | Io(_)
                | MissingTreatmentColumn
                | MissingUnitCutoffs
                | MissingCovariate(_)
                | NoCovariates
                | GridContainsTrueCutoff(_)
                | BadSpec(_)
        )
    }
}

impl From<std::io::Error> for RdError {
    fn from(e: std::io::Error) -> Self {
        RdError::Io(e.to_string())
    }
}

impl From<csv::Error> for RdError {
    fn from(e: csv::Error) -> Self {
        RdError::Io(e.to_string())
    }
}
