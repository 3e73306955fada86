use foam_core::ErrorKind;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),
}

impl CliError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            CliError::Config(_) => ErrorKind::Config,
            CliError::Data(_) => ErrorKind::Data,
        }
    }
}

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

fn code(kind: ErrorKind) -> i32 {
    match kind {
        ErrorKind::Config => EXIT_CONFIG,
        ErrorKind::Data => EXIT_DATA,
        ErrorKind::Numerical => EXIT_NUMERICAL,
    }
}

/// Process exit code for a failed command: the first categorized error in
/// the chain decides; anything else counts as a data error.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<foam_core::Error>() {
            return code(e.kind());
        }
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return code(e.kind());
        }
        if let Some(e) = cause.downcast_ref::<foam_autodiff::AutodiffError>() {
            use foam_autodiff::AutodiffError as A;
            return match e {
                A::NonFinite { .. } | A::NonFiniteGradient { .. } => EXIT_NUMERICAL,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}
