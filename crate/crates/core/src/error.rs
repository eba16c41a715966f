use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // panel
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("duplicate observation for unit `{unit}` at time {time}")]
    DuplicateKey { unit: String, time: i64 },
    #[error("treatment switches off for unit `{unit}` at time {time}")]
    NonAbsorbingTreatment { unit: String, time: i64 },
    #[error("line {line}: column `{column}`: cannot parse `{value}` as a decimal number")]
    InvalidNumber {
        line: u64,
        column: String,
        value: String,
    },
    #[error("no unit has observations in both periods {base} and {end}")]
    EmptyResult { base: i64, end: i64 },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    // spatial
    #[error("unknown unit `{0}`")]
    UnknownUnit(String),
    #[error("negative radius {0}")]
    NegativeRadius(f64),
    #[error("invalid coordinate for unit `{unit}`: {reason}")]
    InvalidCoordinate { unit: String, reason: String },

    // exposure
    #[error("no coordinates for unit `{0}`")]
    MissingCoordinates(String),
    #[error("invalid exposure specification: {0}")]
    InvalidExposureSpec(String),

    // regression
    #[error("design is rank deficient; collinear columns: {}", .0.join(", "))]
    RankDeficient(Vec<String>),
    #[error("fixed-effect demeaning did not converge after {iterations} iterations (max group mean {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("conley covariance requires coordinates or a distance matrix")]
    ConleyWithoutCoordinates,
    #[error("invalid design: {0}")]
    InvalidDesign(String),

    // did
    #[error("group `{0}` has no observations")]
    EmptyGroup(&'static str),
    #[error("no control units are unexposed (every control lies within the spillover radius)")]
    NoUnexposedControls,
    #[error("no treated units are unexposed; the direct effect is not identified")]
    NoUnexposedTreated,
    #[error("switching subsample has no {arm} units within tolerance {tol} of exposure {h_star}")]
    EmptySubsample {
        arm: &'static str,
        h_star: f64,
        tol: f64,
    },
    #[error("invalid estimator specification: {0}")]
    InvalidSpec(String),

    // staggered
    #[error("no clean (untreated, unexposed) observations for the first stage")]
    EmptyFirstStage,
    #[error("{failed} of {total} bootstrap replications failed")]
    TooManyFailures { failed: usize, total: usize },

    // montecarlo
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("no true spillovers among controls; share of spillovers predicted is undefined")]
    ZeroDenominator,
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
}
