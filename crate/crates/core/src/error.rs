use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad classification used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// The request itself is inconsistent (bad spec or option combination).
    Spec,
    /// The input data could not be read or violates the panel contract.
    Data,
    /// The request is well-formed but the data cannot support it.
    Infeasible,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("column `{0}` not found in header")]
    MissingColumn(String),

    #[error("duplicate row for unit `{unit}` at time {time} (line {line})")]
    DuplicateRow { unit: String, time: i64, line: u64 },

    #[error("line {line}: treatment value `{value}` is not 0, 1 or missing")]
    InvalidTreatment { line: u64, value: String },

    #[error("line {line}: time value `{value}` is not an integer")]
    InvalidTime { line: u64, value: String },

    #[error("line {line}: value `{value}` in column `{column}` is not numeric")]
    InvalidNumber {
        line: u64,
        column: String,
        value: String,
    },

    #[error("panel has no rows")]
    EmptyPanel,

    #[error("malformed panel: {0}")]
    MalformedPanel(String),

    #[error("unknown variable `{0}`")]
    UnknownVariable(String),

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("lag {lag} must be smaller than the number of periods ({periods})")]
    LagTooLarge { lag: usize, periods: usize },

    #[error("unit `{unit}` is not a control in matched set {key}")]
    UnknownControl { key: String, unit: String },

    #[error("weights of matched set {key} are invalid: {reason}")]
    InvalidWeights { key: String, reason: String },

    #[error("all {unrefinable} non-empty matched sets are unrefinable ({total} sets, {empty} empty)")]
    AllUnrefinable {
        total: usize,
        empty: usize,
        unrefinable: usize,
    },

    #[error("no usable treated observations for {0}")]
    NoUsableTreated(String),

    #[error("{method} standard errors are not available for {what}")]
    UnsupportedSe { method: String, what: String },

    #[error("analytical standard errors need at least two contributing units, found {0}")]
    TooFewUnits(usize),

    #[error("bootstrap replicate {replicate} found no treated observation after {attempts} draws")]
    BootstrapExhausted { replicate: usize, attempts: usize },

    #[error("matched sets were built without placebo_test enabled")]
    PlaceboNotEnabled,

    #[error("balance table `{0}` has no unrefined columns")]
    MissingUnrefined(String),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            Io(_) | Csv(_) | MissingColumn(_) | DuplicateRow { .. } | InvalidTreatment { .. }
            | InvalidTime { .. } | InvalidNumber { .. } | EmptyPanel | MalformedPanel(_) => {
                ErrorKind::Data
            }
            UnknownVariable(_) | InvalidSpec(_) | LagTooLarge { .. } | UnsupportedSe { .. }
            | PlaceboNotEnabled | UnknownControl { .. } | MissingUnrefined(_) => ErrorKind::Spec,
            InvalidWeights { .. } | AllUnrefinable { .. } | NoUsableTreated(_) | TooFewUnits(_)
            | BootstrapExhausted { .. } => ErrorKind::Infeasible,
        }
    }
}
