use thiserror::Error;

/// Crate-wide error type. Variants mirror the failure modes of the numeric
/// kernels (solver degeneracies, invalid inputs) and of the JSON loaders.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("chain is not unichain: {0}")]
    NonUnichain(String),

    #[error("singular linear system: {0}")]
    SingularSolve(String),

    #[error("non-finite energy: {0}")]
    NonFiniteEnergy(String),

    #[error("support violation: {0}")]
    SupportViolation(String),

    #[error("division by zero support: {0}")]
    DivisionBySupportZero(String),

    #[error("invalid environment spec: {0}")]
    SpecInvalid(String),

    /// Semantic schema violation in a loaded document; `field` names the
    /// offending entry with indices, e.g. `transition[2][0]`.
    #[error("invalid field {field}: {message}")]
    SchemaViolation { field: String, message: String },

    #[error("json syntax error at line {line}, column {column}: {message}")]
    JsonSyntax {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("invariant violated: {0}")]
    InvariantViolation(String),
}

pub type Result<T> = std::result::Result<T, Error>;
