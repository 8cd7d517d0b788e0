//! Error classification driving the process exit code: configuration
//! problems exit 1, runtime failures exit 2.

#[derive(Debug)]
pub enum AppError {
    Config(String),
    Runtime(String),
}

impl AppError {
    pub fn config(msg: impl Into<String>) -> Self {
        AppError::Config(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        AppError::Runtime(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => 1,
            AppError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for AppError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AppError::Config(m) => write!(f, "config error: {m}"),
            AppError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for AppError {}

pub type Result<T> = std::result::Result<T, AppError>;

/// Anything failing after config validation is a runtime error.
pub fn rt<E: std::fmt::Display>(e: E) -> AppError {
    AppError::Runtime(e.to_string())
}
