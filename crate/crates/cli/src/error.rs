use lsa_core::LsaError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] LsaError),

    #[error("divergence in {run} seed {seed} at t/tau = {t}: loss = {loss}")]
    Divergence { run: String, seed: u64, t: f64, loss: f64 },

    #[error("verification failed: {0}")]
    Verify(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Divergence { .. } => 3,
            CliError::Verify(_) => 4,
            CliError::Core(LsaError::Divergence { .. }) => 3,
            CliError::Core(_) | CliError::Io { .. } => 1,
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }
}
