use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("invalid scenario at `{field}`: {reason}")]
    InvalidScenario { field: String, reason: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error(
        "under-determined system: {rows} equations for {cols} unknowns \
         (NLOS-only localization needs at least three NLOS paths from two or more BSs)"
    )]
    UnderDetermined { rows: usize, cols: usize },

    #[error(
        "rank-deficient system (equilibrated condition number {condition:.3e}); \
         NLOS paths from a single BS cannot fix the range scale"
    )]
    RankDeficient { condition: f64 },

    #[error("unidentifiable parameter `{param}` (condition number {condition:.3e})")]
    Unidentifiable { param: String, condition: f64 },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("nonpositive variance: {0}")]
    NonPositiveVariance(String),

    #[error("UE speed {speed:.3e} m/s is too small to define the scatterer velocity direction")]
    VelocityDirectionUndefined { speed: f64 },

    #[error("missing measurement: {0}")]
    MissingMeasurement(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("constraint unsatisfiable after {retries} retries: {what}")]
    Unsatisfiable { what: String, retries: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
