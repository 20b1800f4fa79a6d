pub mod ablate;
pub mod evaluate;
pub mod train;
pub mod verify;

/// Why a subcommand did not succeed; each kind maps to its own exit status.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments or configuration.
    Usage(anyhow::Error),
    /// The run started but could not finish.
    Runtime(anyhow::Error),
    /// A verification suite found a violation.
    Verification(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Verification(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(e) => write!(f, "{e:#}"),
            Failure::Runtime(e) => write!(f, "{e:#}"),
            Failure::Verification(msg) => f.write_str(msg),
        }
    }
}

pub(crate) fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

pub(crate) fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}
