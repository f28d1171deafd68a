use std::path::Path;

use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_CHECK: i32 = 4;
pub const EXIT_INTERNAL: i32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("check failed: {0}")]
    Check(String),
    #[error(transparent)]
    Core(fuseseg::Error),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        use fuseseg::Error as E;
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io(_) => EXIT_IO,
            CliError::Check(_) => EXIT_CHECK,
            CliError::Core(e) => match e {
                E::Config(_) | E::InvalidArgument { .. } | E::Incompatible(_) => EXIT_CONFIG,
                E::Io { .. }
                | E::Json { .. }
                | E::BadMagic { .. }
                | E::BadVersion { .. }
                | E::Truncated { .. }
                | E::ManifestMismatch { .. }
                | E::EmptyDataset(_) => EXIT_IO,
                _ => EXIT_INTERNAL,
            },
        }
    }
}

impl From<fuseseg::Error> for CliError {
    fn from(e: fuseseg::Error) -> Self {
        CliError::Core(e)
    }
}
