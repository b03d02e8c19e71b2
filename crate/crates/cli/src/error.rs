use std::fmt;

/// A failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError { code: EXIT_CONFIG, message: msg.into() }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError { code: EXIT_DATA, message: msg.into() }
    }

    pub fn failure(msg: impl Into<String>) -> Self {
        CliError { code: EXIT_FAILURE, message: msg.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<ctnet::Error> for CliError {
    fn from(e: ctnet::Error) -> Self {
        use ctnet::Error as E;
        let code = match &e {
            E::Config(_) | E::Contract(_) | E::UnsupportedGeometry(_) | E::Checkpoint(_) | E::Json(_) => EXIT_CONFIG,
            E::Data(_) | E::Image { .. } | E::Io(_) => EXIT_DATA,
            E::Numeric { .. } => EXIT_NUMERIC,
            E::Shape(_) | E::UndefinedSimilarity(_) => EXIT_FAILURE,
        };
        CliError { code, message: e.to_string() }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;
