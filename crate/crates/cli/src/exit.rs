//! Process exit codes.

use sda_core::SdaError;

pub const OK: i32 = 0;
pub const OTHER: i32 = 1;
pub const CONFIG: i32 = 2;
pub const DATA: i32 = 3;
pub const DIVERGENCE: i32 = 4;
pub const PROVENANCE: i32 = 5;
pub const EXISTS: i32 = 6;

/// An output file is already present and `--force` was not given.
#[derive(Debug)]
pub struct OutputExists(pub std::path::PathBuf);

impl std::fmt::Display for OutputExists {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} already exists (pass --force to overwrite)", self.0.display())
    }
}

impl std::error::Error for OutputExists {}

/// A configuration file that failed to parse.
#[derive(Debug)]
pub struct BadConfig(pub String);

impl std::fmt::Display for BadConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for BadConfig {}

pub fn code_for(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<OutputExists>().is_some() {
            return EXISTS;
        }
        if cause.downcast_ref::<BadConfig>().is_some() {
            return CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<SdaError>() {
            return match e {
                SdaError::Config(_) | SdaError::UnknownModality { .. } => CONFIG,
                SdaError::Divergence { .. } => DIVERGENCE,
                SdaError::Provenance { .. } => PROVENANCE,
                SdaError::Parse { .. }
                | SdaError::UnknownItem(_)
                | SdaError::DuplicateItem(_)
                | SdaError::UnknownUser(_)
                | SdaError::Corrupt { .. }
                | SdaError::Version { .. }
                | SdaError::Io { .. }
                | SdaError::NotFound(_)
                | SdaError::Csv(_)
                | SdaError::Json(_)
                | SdaError::Shape(_)
                | SdaError::Dimension { .. }
                | SdaError::Degenerate(_) => DATA,
                _ => OTHER,
            };
        }
    }
    OTHER
}
