use thiserror::Error;

pub type Result<T, E = BicaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum BicaError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric divergence: {0}")]
    Divergence(String),
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl BicaError {
    /// Process exit code for the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            BicaError::Shape(_) | BicaError::Invalid(_) | BicaError::Config(_) => 2,
            BicaError::Divergence(_) => 3,
            BicaError::Version { .. } | BicaError::Format(_) | BicaError::Io(_) => 4,
        }
    }
}
