use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] bcsnet_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("gradient check failed: max relative error {max_rel_error:e}, offending {params}")]
    Gradcheck { max_rel_error: f64, params: String },
}

impl Error {
    /// Stable lowercase tag for the error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Core(bcsnet_core::Error::Validation(_)) => "validation",
            Error::Core(bcsnet_core::Error::Shape(_)) => "shape",
            Error::Core(bcsnet_core::Error::NonFinite(_)) => "non_finite",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Config { .. } => "config",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Csv { .. } => "csv",
            Error::Gradcheck { .. } => "gradcheck",
        }
    }

    /// `error[kind]: message` on a single line.
    pub fn one_line(&self) -> String {
        let mut msg = self.to_string();
        if let Error::Config { .. } = self {
            // toml parse errors span several lines with a source excerpt
            msg = msg.split_whitespace().collect::<Vec<_>>().join(" ");
        }
        format!("error[{}]: {}", self.kind(), msg.replace(['\n', '\r'], " "))
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn ckpt(path: &Path, message: impl Into<String>) -> Self {
        Error::Checkpoint {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
