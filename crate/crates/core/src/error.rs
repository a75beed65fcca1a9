use thiserror::Error;

/// Errors raised by the simulation and estimation routines.
#[derive(Debug, Error)]
pub enum AoError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AoError>;

pub(crate) fn ensure_same_shape(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(AoError::Dimension(format!(
            "{what}: {}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}
