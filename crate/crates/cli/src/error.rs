use thiserror::Error;

/// Problems with what the user handed over: files, flags or data. These
/// map to exit code 2.
#[derive(Debug, Error)]
pub enum InputError {
    #[error("{file}: {message}")]
    File { file: String, message: String },

    #[error("{file}, line {line}: {message}")]
    Row { file: String, line: u64, message: String },

    #[error("{file}, line {line}, column {column}: {message}")]
    Cell {
        file: String,
        line: u64,
        column: String,
        message: String,
    },

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] confhit::Error),
}

impl InputError {
    pub fn file(file: &str, message: impl Into<String>) -> Self {
        Self::File {
            file: file.into(),
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::Usage(message.into())
    }
}
