//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric error.

use std::fmt;

pub const USAGE: u8 = 2;
pub const DATA: u8 = 3;
pub const NUMERIC: u8 = 4;

/// Bad flag combination or unknown name.
#[derive(Debug)]
pub struct UsageError(pub String);

/// Unreadable, empty or malformed input.
#[derive(Debug)]
pub struct DataError(pub String);

/// A check that ran to completion and failed.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}
impl std::error::Error for DataError {}
impl std::error::Error for CheckFailed {}

/// Exit code for an error, from the first recognized cause in its chain.
pub fn code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return USAGE;
        }
        if cause.is::<DataError>() || cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return DATA;
        }
        if cause.is::<CheckFailed>() {
            return NUMERIC;
        }
        if let Some(e) = cause.downcast_ref::<nafkit::Error>() {
            return match e {
                nafkit::Error::Domain(_) | nafkit::Error::Shape { .. } | nafkit::Error::Checkpoint(_) => DATA,
                _ => NUMERIC,
            };
        }
    }
    DATA
}
