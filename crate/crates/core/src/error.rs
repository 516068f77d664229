use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch on axis `{axis}`: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("attention requires at least one click")]
    EmptyClicks,
    #[error("coarse prediction has no foreground above threshold")]
    EmptyForeground,
    #[error("prediction already matches ground truth")]
    NoError,
    #[error("pixel ({row}, {col}) already clicked")]
    DuplicateClick { row: usize, col: usize },
    #[error("click at ({row}, {col}) outside {height}×{width} image")]
    OutOfBounds {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },
    #[error("no unclicked error pixel remains")]
    ClicksExhausted,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("image {width}×{height} exceeds the {max_side}-pixel side limit")]
    ImageTooLarge { height: usize, width: usize, max_side: usize },
    #[error("config: {0}")]
    Config(String),
    #[error("training aborted: {0}")]
    Training(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
