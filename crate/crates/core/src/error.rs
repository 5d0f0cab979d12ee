use thiserror::Error;

/// Error type shared by every module of the crate.
#[derive(Debug, Error)]
pub enum SnipError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("state error: {0}")]
    State(String),

    /// The efficiency target cannot be met. `max_achievable` is the largest
    /// reachable efficiency for the offending (group of) layers.
    #[error("infeasible efficiency target {target} (max achievable {max_achievable}{})", group_suffix(*.group))]
    Infeasible {
        target: f64,
        max_achievable: f64,
        group: Option<usize>,
    },

    #[error("instance too large: {0}")]
    TooLarge(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn group_suffix(group: Option<usize>) -> String {
    match group {
        Some(g) => format!(" in group {g}"),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, SnipError>;

pub(crate) fn invalid(msg: impl Into<String>) -> SnipError {
    SnipError::InvalidArgument(msg.into())
}

pub(crate) fn shape_err(msg: impl Into<String>) -> SnipError {
    SnipError::Shape(msg.into())
}
