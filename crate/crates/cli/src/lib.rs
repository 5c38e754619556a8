//! File formats, configuration and command execution behind the `confhit`
//! binary.

pub mod config;
pub mod csvio;
pub mod error;
pub mod format;
pub mod run;

pub use config::{Command, RunConfig, WeightSource};
pub use error::InputError;
pub use run::{execute, Execution};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NOT_CONFIDENT: i32 = 3;

/// Exit code for an error: 2 when the input was at fault, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let input = err
        .chain()
        .any(|e| e.is::<InputError>() || e.is::<confhit::Error>() || e.is::<csv::Error>());
    if input {
        EXIT_INPUT
    } else {
        EXIT_FAILURE
    }
}

/// Reads the config embedded in a report file.
pub fn config_from_report(text: &str) -> Result<RunConfig, InputError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| InputError::usage(format!("report is not JSON: {e}")))?;
    let cfg = value
        .get("config")
        .ok_or_else(|| InputError::usage("report has no 'config' field"))?;
    serde_json::from_value(cfg.clone()).map_err(|e| InputError::usage(format!("embedded config is invalid: {e}")))
}
