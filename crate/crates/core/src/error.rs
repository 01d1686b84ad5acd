use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point {lat:.6},{lon:.6} is not a valid WGS-84 coordinate")]
    InvalidGeoPoint { lat: f64, lon: f64 },
    #[error("requested crop falls outside the raster (needs {needed_m:.1} m margin)")]
    OutOfBounds { needed_m: f64 },
    #[error("raster has no usable georeference metadata")]
    MissingGeoreference,
    #[error("tile of {width}x{height} px is too small to resample")]
    DegenerateTile { width: usize, height: usize },
    #[error("field of view {0} deg is outside (0, 360]")]
    InvalidFov(f64),
    #[error("bad image dimensions: {0}")]
    BadDimensions(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite activation in {0}")]
    NonFiniteActivation(&'static str),
    #[error("feature map has zero norm")]
    ZeroFeature,
    #[error("non-finite gradient at parameter {0}")]
    NonFiniteGradient(usize),
    #[error("window start {start} width {width} invalid for feature width {total}")]
    BadWindow { start: usize, width: usize, total: usize },
    #[error("batch of {0} is too small, at least 2 pairs are needed")]
    BatchTooSmall(usize),
    #[error("similarity vectors of different lengths ({0} vs {1}) cannot be accumulated")]
    MixedGranularity(usize, usize),
    #[error("no candidate location stayed consistent over the frame window")]
    NoConsistentHypothesis,
    #[error("empty evaluation set")]
    EmptySet,
    #[error("training diverged at epoch {epoch}, step {step}")]
    DivergedLoss { epoch: usize, step: usize },
    #[error("timestamps must increase strictly ({prev} then {next})")]
    NonMonotonicTimestamp { prev: f64, next: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint does not match the configured network: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[cfg(feature = "io")]
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[cfg(feature = "io")]
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
