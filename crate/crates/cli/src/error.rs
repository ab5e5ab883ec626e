//! Error codes and exit statuses.

use std::fmt;

use panelmatch::{Error, ErrorKind};

/// Stable error codes. The leading digit of the numeric code matches the
/// process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Code {
    ConfigRead,
    ConfigParse,
    InvalidValue,
    AnalyticalSeForAte,
    AnalyticalSePooled,
    PlaceboWithoutFlag,
    InvalidRefinement,
    SpecRejected,
    Usage,
    DataRead,
    DataInvalid,
    Infeasible,
    Output,
}

impl Code {
    pub fn id(self) -> &'static str {
        match self {
            Code::ConfigRead => "E201",
            Code::ConfigParse => "E202",
            Code::InvalidValue => "E203",
            Code::AnalyticalSeForAte => "E204",
            Code::AnalyticalSePooled => "E205",
            Code::PlaceboWithoutFlag => "E206",
            Code::InvalidRefinement => "E207",
            Code::SpecRejected => "E208",
            Code::Usage => "E209",
            Code::DataRead => "E301",
            Code::DataInvalid => "E302",
            Code::Infeasible => "E401",
            Code::Output => "E303",
        }
    }

    pub fn exit_status(self) -> i32 {
        match self {
            Code::DataRead | Code::DataInvalid | Code::Output => 3,
            Code::Infeasible => 4,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: Code,
    pub message: String,
}

impl CliError {
    pub fn new(code: Code, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.code.id(), self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) => Code::DataRead,
            Error::UnsupportedSe { what, .. } if what.contains("pooled") => Code::AnalyticalSePooled,
            Error::UnsupportedSe { .. } => Code::AnalyticalSeForAte,
            Error::PlaceboNotEnabled => Code::PlaceboWithoutFlag,
            _ => match e.kind() {
                ErrorKind::Spec => Code::SpecRejected,
                ErrorKind::Data => Code::DataInvalid,
                ErrorKind::Infeasible => Code::Infeasible,
            },
        };
        CliError::new(code, e.to_string())
    }
}
