use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("degenerate line: {0}")]
    DegenerateLine(&'static str),
    #[error("line passes through the camera center")]
    DegenerateProjection,
    #[error("image line has vanishing (l1, l2)")]
    DegenerateImageLine,
    #[error("vanishing point at infinity")]
    VpAtInfinity,
    #[error("point behind camera (depth {0})")]
    BehindCamera(f64),
    #[error("sliding window is full ({0} clones)")]
    WindowOverflow(usize),
    #[error("sliding window is empty")]
    EmptyWindow,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("timestamps not strictly increasing at t = {0}")]
    TimeOrder(f64),
    #[error("track references clone {0} which is not in the window")]
    StaleTrack(u64),
    #[error("feature Jacobian is rank deficient ({rank} < {needed})")]
    DegenerateFeature { rank: usize, needed: usize },
    #[error("triangulation failed: {0}")]
    TriangulationFailed(&'static str),
    #[error("filter diverged: {0}")]
    Diverged(String),
    #[error("innovation covariance is singular")]
    SingularInnovation,
    #[error("config: {0}")]
    Config(String),
    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: u64, msg: String },
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}
