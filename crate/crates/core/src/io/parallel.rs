//! Order-preserving parallel map on a dedicated worker pool.

use rayon::prelude::*;
use rayon::ThreadPool;

use super::IoError;

/// Builds a pool with `workers` threads (0: rayon's default of one per core).
pub fn worker_pool(workers: usize) -> Result<ThreadPool, IoError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| IoError::invalid("run.workers", e))
}

/// Applies `f` to every item on `workers` threads; results keep the input order.
pub fn map_ordered<T, R, F>(items: &[T], workers: usize, f: F) -> Result<Vec<R>, IoError>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    Ok(worker_pool(workers)?.install(|| items.par_iter().map(f).collect()))
}

/// Runs `f` inside a pool with `workers` threads, so nested rayon work uses that pool.
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> Result<R, IoError> {
    Ok(worker_pool(workers)?.install(f))
}
