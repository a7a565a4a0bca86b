//! Command-line front end: configuration, training and sampling runs,
//! evaluation reports and small inspection tools.

pub mod commands;
pub mod config;

pub use commands::*;
pub use config::RunConfig;

use qdiffusion::Error;

pub const THREADS_ENV: &str = "QDIFF_THREADS";

/// 2 for configuration and validation problems, 3 for numerical failures,
/// 4 for file and image I/O.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) => 3,
        Error::Io { .. } | Error::Image { .. } | Error::Format { .. } => 4,
        Error::Config { .. } | Error::InvalidArgument(_) | Error::Shape { .. } | Error::OutOfRange { .. } => 2,
    }
}

/// Sizes the worker pool from `QDIFF_THREADS` when set.
pub fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}
