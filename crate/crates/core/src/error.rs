use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can report. Each variant maps to exactly one
/// stable code returned by [`Error::code`].
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("version conflict: {0}")]
    VersionConflict(String),
    #[error("duplicate field: {0}")]
    DuplicateField(String),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("unknown source: {0}")]
    UnknownSource(String),
    #[error("unknown dataset: {0}")]
    UnknownDataset(String),
    #[error("duplicate source: {0}")]
    DuplicateSource(String),
    #[error("rule conflict: {0}")]
    RuleConflict(String),
    #[error("illegal transition: {0}")]
    IllegalTransition(String),
    #[error("malformed document: {0}")]
    MalformedDocument(String),
    #[error("integrity violation: {0}")]
    IntegrityViolation(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unparseable batch: {0}")]
    Unparseable(String),
    #[error("type error: {0}")]
    Type(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("mapping invalid: {0}")]
    MappingInvalid(String),
    #[error("upstream level not refreshed: {0}")]
    UpstreamNotRefreshed(String),
    #[error("change already resolved: {0}")]
    AlreadyResolved(String),
    #[error("change already has open proposals: {0}")]
    AlreadyProposed(String),
    #[error("missing parameter: {0}")]
    MissingParameter(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("option kind not compatible with change: {0}")]
    IncompatibleOption(String),
    #[error("apply failed: {0}")]
    ApplyFailed(String),
    #[error("unknown cube: {0}")]
    UnknownCube(String),
    #[error("invalid cube: {0}")]
    InvalidCube(String),
    #[error("invalid filter: {0}")]
    InvalidFilter(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("no finer attribute: {0}")]
    NoFiner(String),
    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// Stable machine-readable identifier.
    pub fn code(&self) -> &'static str {
        match self {
            Error::VersionConflict(_) => "VERSION_CONFLICT",
            Error::DuplicateField(_) => "DUPLICATE_FIELD",
            Error::InvalidSchema(_) => "INVALID_SCHEMA",
            Error::NotFound(_) => "NOT_FOUND",
            Error::UnknownSource(_) => "UNKNOWN_SOURCE",
            Error::UnknownDataset(_) => "UNKNOWN_DATASET",
            Error::DuplicateSource(_) => "DUPLICATE_SOURCE",
            Error::RuleConflict(_) => "RULE_CONFLICT",
            Error::IllegalTransition(_) => "ILLEGAL_TRANSITION",
            Error::MalformedDocument(_) => "MALFORMED_DOCUMENT",
            Error::IntegrityViolation(_) => "INTEGRITY_VIOLATION",
            Error::Parse(_) => "PARSE_ERROR",
            Error::Unparseable(_) => "UNPARSEABLE",
            Error::Type(_) => "TYPE_ERROR",
            Error::SchemaMismatch(_) => "SCHEMA_MISMATCH",
            Error::MappingInvalid(_) => "MAPPING_INVALID",
            Error::UpstreamNotRefreshed(_) => "UPSTREAM_NOT_REFRESHED",
            Error::AlreadyResolved(_) => "ALREADY_RESOLVED",
            Error::AlreadyProposed(_) => "ALREADY_PROPOSED",
            Error::MissingParameter(_) => "MISSING_PARAMETER",
            Error::InvalidParameter(_) => "INVALID_PARAMETER",
            Error::IncompatibleOption(_) => "INCOMPATIBLE_OPTION",
            Error::ApplyFailed(_) => "APPLY_FAILED",
            Error::UnknownCube(_) => "UNKNOWN_CUBE",
            Error::InvalidCube(_) => "INVALID_CUBE",
            Error::InvalidFilter(_) => "INVALID_FILTER",
            Error::InvalidQuery(_) => "INVALID_QUERY",
            Error::NoFiner(_) => "NO_FINER",
            Error::Io(_) => "IO_ERROR",
        }
    }

    /// The full set of codes, in declaration order.
    pub const CODES: &'static [&'static str] = &[
        "VERSION_CONFLICT",
        "DUPLICATE_FIELD",
        "INVALID_SCHEMA",
        "NOT_FOUND",
        "UNKNOWN_SOURCE",
        "UNKNOWN_DATASET",
        "DUPLICATE_SOURCE",
        "RULE_CONFLICT",
        "ILLEGAL_TRANSITION",
        "MALFORMED_DOCUMENT",
        "INTEGRITY_VIOLATION",
        "PARSE_ERROR",
        "UNPARSEABLE",
        "TYPE_ERROR",
        "SCHEMA_MISMATCH",
        "MAPPING_INVALID",
        "UPSTREAM_NOT_REFRESHED",
        "ALREADY_RESOLVED",
        "ALREADY_PROPOSED",
        "MISSING_PARAMETER",
        "INVALID_PARAMETER",
        "INCOMPATIBLE_OPTION",
        "APPLY_FAILED",
        "UNKNOWN_CUBE",
        "INVALID_CUBE",
        "INVALID_FILTER",
        "INVALID_QUERY",
        "NO_FINER",
        "IO_ERROR",
    ];

    pub fn message(&self) -> String {
        self.to_string()
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
