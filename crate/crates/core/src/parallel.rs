//! Worker pool sizing. Results never depend on the number of workers: work is
//! split into fixed chunks and reduced in index order.

use crate::error::{Error, Result};

/// Environment variable capping worker parallelism.
pub const THREADS_ENV: &str = "SULCAL_SSL_THREADS";

/// Worker count from the environment, falling back to the number of cores.
pub fn configured_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Validation(format!("cannot start {threads} workers: {e}")))
}
