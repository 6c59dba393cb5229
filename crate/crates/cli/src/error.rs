use thiserror::Error;

use ppdem_core::Error as CoreError;

pub const EXIT_OK: u8 = 0;
pub const EXIT_IO: u8 = 1;
pub const EXIT_NOT_CONVERGED: u8 = 2;
pub const EXIT_PROTOCOL: u8 = 3;
pub const EXIT_INPUT: u8 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("{0}")]
    NotConverged(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Io(_) | CliError::Json(_) => EXIT_IO,
            CliError::NotConverged(_) => EXIT_NOT_CONVERGED,
            CliError::Core(e) => match e.root() {
                CoreError::Io(_)
                | CoreError::Csv(_)
                | CoreError::Json(_)
                | CoreError::UnknownStrategy { .. } => EXIT_IO,
                CoreError::ComponentCollapse { .. } => EXIT_NOT_CONVERGED,
                CoreError::Dimension(_)
                | CoreError::InvalidInput(_)
                | CoreError::Data(_)
                | CoreError::Conditioning { .. }
                | CoreError::NotPositiveDefinite { .. }
                | CoreError::Metric(_) => EXIT_INPUT,
                _ => EXIT_PROTOCOL,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_root_cause() {
        let dim = CliError::Core(CoreError::Dimension("y0".into()).in_context("conditional"));
        assert_eq!(dim.exit_code(), EXIT_INPUT);
        let consensus = CliError::Core(CoreError::NonConvergence {
            rounds: 3,
            residual: 1.0,
        });
        assert_eq!(consensus.exit_code(), EXIT_PROTOCOL);
        assert_eq!(
            CliError::NotConverged("em".into()).exit_code(),
            EXIT_NOT_CONVERGED
        );
        assert_eq!(CliError::Usage("x".into()).exit_code(), EXIT_IO);
    }
}
