use std::path::Path;

use labmae::Error;

/// Exit codes. Documented in `--help`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Internal = 1,
    Usage = 2,
    MissingFile = 3,
    Schema = 4,
    Data = 5,
    Numeric = 6,
    ReplayMismatch = 7,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Internal => "internal",
            Kind::Usage => "usage",
            Kind::MissingFile => "missing_file",
            Kind::Schema => "schema",
            Kind::Data => "data",
            Kind::Numeric => "numeric",
            Kind::ReplayMismatch => "replay_mismatch",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn new(kind: Kind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn usage(m: impl Into<String>) -> Self {
        Self::new(Kind::Usage, m)
    }

    pub fn schema(m: impl Into<String>) -> Self {
        Self::new(Kind::Schema, m)
    }

    pub fn internal(m: impl Into<String>) -> Self {
        Self::new(Kind::Internal, m)
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        let kind = if e.kind() == std::io::ErrorKind::NotFound {
            Kind::MissingFile
        } else {
            Kind::Internal
        };
        Self::new(kind, format!("{}: {e}", path.display()))
    }

    /// One JSON object on one line.
    pub fn line(&self) -> String {
        serde_json::json!({
            "error": self.kind.name(),
            "code": self.kind as i32,
            "message": self.message,
        })
        .to_string()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => Kind::MissingFile,
            Error::Io { .. } => Kind::Internal,
            Error::Config(_) => Kind::Usage,
            Error::Dimension(_)
            | Error::Parse { .. }
            | Error::UnknownFeature(_)
            | Error::Checkpoint(_)
            | Error::Json(_) => Kind::Schema,
            Error::InsufficientData(_)
            | Error::DegenerateRange { .. }
            | Error::DegenerateVariance
            | Error::EmptyInput
            | Error::Coverage(_)
            | Error::Trace(_)
            | Error::UnknownRegion(_)
            | Error::UnknownGroup(_)
            | Error::TruthUnavailable
            | Error::ZeroDenominator => Kind::Data,
            Error::Divergence { .. } | Error::NonFiniteGradient { .. } | Error::Numeric { .. } | Error::FullyMaskedRow { .. } => {
                Kind::Numeric
            }
            Error::State(_) => Kind::Internal,
        };
        Self::new(kind, e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_line_json() {
        let e = CliError::new(Kind::Data, "two\nlines \"quoted\"");
        let l = e.line();
        assert!(!l.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&l).unwrap();
        assert_eq!(v["code"], 5);
        assert_eq!(v["error"], "data");
    }
}
