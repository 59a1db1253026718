use std::fmt;

use fedmerge::Error;

pub const USAGE: u8 = 2;
pub const INPUT: u8 = 3;
pub const MISSING_META: u8 = 4;
pub const ORACLE: u8 = 5;

/// A flag-level problem detected after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return USAGE;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::MissingTrainingMeta { .. } => MISSING_META,
                Error::OracleNotConverged { .. } => ORACLE,
                Error::BadThreshold(_) | Error::BadMergeSpec(_) | Error::BadParameter { .. } => USAGE,
                _ => INPUT,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() || cause.is::<csv::Error>() {
            return INPUT;
        }
    }
    1
}
