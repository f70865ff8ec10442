use alloc::boxed::Box;
use alloc::string::String;

/// Errors surfaced by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A caller passed shapes, indices or values that violate an operation's contract.
    #[error("invalid argument: {0}")]
    Argument(String),
    /// A configuration that cannot be executed (e.g. every prototype empty).
    #[error("invalid configuration: {0}")]
    Config(String),
    /// Training diverged (non-finite loss or gradient).
    #[error("training error: {0}")]
    Training(String),
    /// A pipeline stage failed.
    #[error("round {round}, stage {stage}: {source}")]
    Stage { round: usize, stage: &'static str, source: Box<Error> },
}

impl Error {
    pub fn in_stage(self, round: usize, stage: &'static str) -> Self {
        Error::Stage { round, stage, source: Box::new(self) }
    }
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! arg_err {
    ($($t:tt)*) => {
        $crate::error::Error::Argument(alloc::format!($($t)*))
    };
}
pub(crate) use arg_err;
