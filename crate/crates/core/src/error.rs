use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("pixel ({row}, {col}) outside {width}x{height} image")]
    PixelOutOfBounds {
        row: usize,
        col: usize,
        width: usize,
        height: usize,
    },
    #[error("unknown class id {0}")]
    UnknownClass(i32),
    #[error("image of {width}x{height} is too small for a {margin} pixel border margin")]
    DegenerateImage {
        width: usize,
        height: usize,
        margin: usize,
    },
    #[error("no free camera position after {0} attempts")]
    NoFreePosition(usize),
    #[error("degenerate look-at: eye and target coincide")]
    DegenerateLookAt,
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("correlation undefined: only {0} valid points")]
    UndefinedCorrelation(usize),
    #[error("label {0:?} missing from embedding source")]
    MissingLabel(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

impl Error {
    /// NaN/Inf aborts, as opposed to validation failures.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }
}
