//! Error taxonomy with the documented exit-code mapping:
//! 1 = configuration, 2 = runtime, 3 = I/O.

use std::fmt;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
    Io(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }

    pub fn io(msg: impl Into<String>) -> Self {
        CliError::Io(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<wada_core::data::DataError> for CliError {
    fn from(e: wada_core::data::DataError) -> Self {
        match e {
            wada_core::data::DataError::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<wada_core::dynamics::DynamicsError> for CliError {
    fn from(e: wada_core::dynamics::DynamicsError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<wada_core::eval::EvalError> for CliError {
    fn from(e: wada_core::eval::EvalError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<wada_core::averaging::AveragingError> for CliError {
    fn from(e: wada_core::averaging::AveragingError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<wada_core::ot::OtError> for CliError {
    fn from(e: wada_core::ot::OtError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<wada_core::measures::MeasureError> for CliError {
    fn from(e: wada_core::measures::MeasureError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
