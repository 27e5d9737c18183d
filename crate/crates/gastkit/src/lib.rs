//! Command-line pipeline around `gast-core`: synthetic dataset files,
//! geometry priors, training, inference, evaluation and plots.

pub mod audit;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod infer;
pub mod io;
pub mod plot;
pub mod prior;
pub mod trainer;

pub use error::{Error, Result};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "GASTKIT_THREADS";

/// Sizes the global worker pool from `GASTKIT_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Contract(format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Contract(format!("thread pool: {e}")))
}
