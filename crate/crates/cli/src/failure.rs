use std::fmt;

/// Runner failure, mapped to the process exit code.
#[derive(Debug)]
pub enum Failure {
    /// Invalid configuration or arguments (exit 2).
    Config(String),
    /// A numerical stage rejected its input or diverged (exit 3).
    Numerical { stage: &'static str, error: tpshock_core::Error },
    /// Output could not be written (exit 1).
    Io(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Numerical { .. } => 3,
            Failure::Io(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Failure::Numerical { stage, error } => write!(f, "numerical failure in stage `{stage}`: {error}"),
            Failure::Io(msg) => write!(f, "output error: {msg}"),
        }
    }
}

pub trait Staged<T> {
    fn stage(self, name: &'static str) -> Result<T, Failure>;
}

impl<T> Staged<T> for tpshock_core::Result<T> {
    fn stage(self, name: &'static str) -> Result<T, Failure> {
        self.map_err(|error| Failure::Numerical { stage: name, error })
    }
}
