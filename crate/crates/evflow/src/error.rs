//! Error type shared across the crate.

/// All failure modes of the library surface.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("events not sorted by timestamp (inversion at index {index})")]
    UnsortedEvents { index: usize },

    #[error("event at ({x}, {y}) lies outside the {width}x{height} frame")]
    EventOutOfFrame { x: f32, y: f32, width: u32, height: u32 },

    #[error("timestamp {t_us} us outside window [{begin_us}, {end_us}) us")]
    OutsideWindow { t_us: u64, begin_us: u64, end_us: u64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("reference index {t_ref} exceeds partition count {r}")]
    ReferenceOutOfRange { t_ref: usize, r: usize },

    #[error("window {window} has no events and no initial flow to fall back on")]
    NothingToOptimize { window: usize },

    #[error("no pixel is valid in both displacement maps")]
    NoValidPixels,

    #[error("identity-warp image has zero variance; FWL is undefined")]
    ZeroVarianceBaseline,

    #[error("identity-warp loss is zero; RSAT is undefined")]
    ZeroLossBaseline,

    #[error("scene spec cannot produce events: {0}")]
    Scene(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("{path}: {msg}")]
    FileFormat { path: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
