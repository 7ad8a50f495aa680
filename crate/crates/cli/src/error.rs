use std::fmt;
use std::path::Path;

use lungpatch_core::ErrorClass;

pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_INTERNAL: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_VALIDATION,
            msg: msg.into(),
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            msg: msg.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::data(format!("{}: {e}", path.display()))
    }

    /// Prefixes the message, keeping the exit code.
    pub fn context(self, what: impl fmt::Display) -> Self {
        Self {
            code: self.code,
            msg: format!("{what}: {}", self.msg),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl From<lungpatch_core::Error> for CliError {
    fn from(e: lungpatch_core::Error) -> Self {
        let code = match e.class() {
            ErrorClass::Validation => EXIT_VALIDATION,
            ErrorClass::Data => EXIT_DATA,
        };
        Self {
            code,
            msg: e.to_string(),
        }
    }
}

macro_rules! via_core {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                lungpatch_core::Error::from(e).into()
            }
        }
    )*};
}

via_core!(
    lungpatch_core::imaging::ImagingError,
    lungpatch_core::lunggrid::GridError,
    lungpatch_core::labels::LabelError,
    lungpatch_core::segbaseline::SegError,
    lungpatch_core::nnet::NetError,
    lungpatch_core::metrics::MetricError
);

pub type Result<T, E = CliError> = std::result::Result<T, E>;
