use std::fmt;
use std::path::Path;

/// Failures grouped by exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Codec(dlic::Error),
}

impl CliError {
    pub fn io(path: &Path, e: impl fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io(_) => "io",
            CliError::Codec(e) => match e {
                dlic::Error::Io(_) => "io",
                dlic::Error::Corrupt { .. } | dlic::Error::Incompatible(_) | dlic::Error::Format(_) | dlic::Error::Csv(_) => {
                    "format"
                }
                dlic::Error::Numerical { .. } | dlic::Error::Training { .. } | dlic::Error::NoOverlap(_) => "numerical",
                _ => "contract",
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "config" => 2,
            "io" => 3,
            "format" => 4,
            "numerical" => 5,
            _ => 6,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Io(m) => f.write_str(m),
            CliError::Codec(e) => write!(f, "{e}"),
        }
    }
}

impl From<dlic::Error> for CliError {
    fn from(e: dlic::Error) -> Self {
        CliError::Codec(e)
    }
}
