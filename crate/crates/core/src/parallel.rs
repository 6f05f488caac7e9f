//! Thread-count control for internal data parallelism.

/// Environment variable capping the worker threads used by tensor kernels.
pub const THREADS_ENV: &str = "SPDX_THREADS";

/// Reads [`THREADS_ENV`]; `None` when unset, empty or not a positive integer.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Sizes the global worker pool from [`THREADS_ENV`].
///
/// Must run before any parallel kernel; later calls are ignored because the
/// global pool can only be built once. Returns the thread count in effect.
pub fn init_from_env() -> usize {
    if let Some(n) = threads_from_env() {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    rayon::current_num_threads()
}
