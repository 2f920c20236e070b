use std::fmt;

/// Where a non-finite value was first observed during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NumericSite {
    Scores { layer: usize, head: usize },
    Attention { layer: usize, head: usize },
    Hidden { layer: usize },
    Logits,
    Input,
}

impl fmt::Display for NumericSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NumericSite::Scores { layer, head } => write!(f, "scores (layer {layer}, head {head})"),
            NumericSite::Attention { layer, head } => {
                write!(f, "attention (layer {layer}, head {head})")
            }
            NumericSite::Hidden { layer } => write!(f, "hidden state after layer {layer}"),
            NumericSite::Logits => write!(f, "output logits"),
            NumericSite::Input => write!(f, "input values"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    Length { len: usize, max: usize },

    #[error("non-finite value in {0}")]
    Numeric(NumericSite),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
