//! Process exit codes.
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | any other failure |
//! | 2 | configuration error |
//! | 3 | synthesis stalled |
//! | 4 | non-finite training loss |
//! | 5 | corrupt or unsupported checkpoint |
//! | 6 | missing or corrupt record files |

use ncal_core::Error;

pub const OK: i32 = 0;
pub const OTHER: i32 = 1;
pub const CONFIG: i32 = 2;
pub const STALLED: i32 = 3;
pub const NON_FINITE: i32 = 4;
pub const CHECKPOINT: i32 = 5;
pub const RECORDS: i32 = 6;

#[derive(Debug, thiserror::Error)]
#[error("configuration error: {0}")]
pub struct ConfigError(pub String);

#[derive(Debug, thiserror::Error)]
#[error("records: {0}")]
pub struct RecordsError(pub String);

pub fn code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return CONFIG;
    }
    if err.downcast_ref::<RecordsError>().is_some() {
        return RECORDS;
    }
    if err.downcast_ref::<clap::Error>().is_some() {
        return CONFIG;
    }
    match err.downcast_ref::<Error>() {
        Some(
            Error::InvalidConfig(_)
            | Error::BadRigFile(_)
            | Error::BadObjectFile(_)
            | Error::UnknownRecalibrator(_)
            | Error::ShapeMismatch(_),
        ) => CONFIG,
        Some(Error::SynthesisStalled { .. }) => STALLED,
        Some(Error::NonFiniteLoss { .. }) => NON_FINITE,
        Some(Error::CorruptCheckpoint(_) | Error::UnsupportedVersion { .. }) => CHECKPOINT,
        _ => OTHER,
    }
}
