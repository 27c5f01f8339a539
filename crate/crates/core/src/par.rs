//! Order-preserving data parallelism. With the `parallel` feature the maps
//! run on rayon; without it they run sequentially. Either way results are
//! returned in index order, and reductions are performed by the caller in
//! that order, so output never depends on the worker count.

use crate::error::Result;

/// Fixed reduction block size; independent of the number of workers.
pub const CHUNK: usize = 16;

pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

pub fn try_map_indexed<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    map_indexed(n, f).into_iter().collect()
}

/// Runs `f` with at most `threads` workers (0 = library default). A no-op
/// wrapper when built without the `parallel` feature.
pub fn with_threads<R, F>(threads: usize, f: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    #[cfg(feature = "parallel")]
    {
        if threads == 0 {
            return f();
        }
        match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}

/// Thread cap from `SSLI_THREADS` (unset, empty or unparsable means 0 = auto).
pub fn threads_from_env() -> usize {
    std::env::var("SSLI_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}
