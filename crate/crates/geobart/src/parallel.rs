//! Data-parallel map with a sequential fallback. With the `parallel`
//! feature (default) [`par_map`] fans work out over a rayon pool sized by
//! the `GEOBART_THREADS` environment variable; without it, both entry
//! points run sequentially. Results preserve input order either way, so
//! output is identical across modes for pure closures.

/// Environment variable controlling the worker-thread count.
pub const THREADS_ENV: &str = "GEOBART_THREADS";

/// Parses a thread-count override from an environment value.
fn parse_thread_count(value: Option<&str>) -> Option<usize> {
    let v = value?.trim();
    if v.is_empty() {
        return None;
    }
    match v.parse::<usize>() {
        Ok(n) if n > 0 => Some(n),
        _ => {
            log::warn!("{THREADS_ENV}={v} is not a positive integer; ignoring");
            None
        }
    }
}

/// Applies any `GEOBART_THREADS` override to the global rayon pool. Call
/// once at startup; later calls are no-ops (the pool is build-once).
/// Without the `parallel` feature this only validates the variable.
pub fn configure_threads() {
    let env = std::env::var(THREADS_ENV).ok();
    let requested = parse_thread_count(env.as_deref());
    #[cfg(feature = "parallel")]
    if let Some(n) = requested {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::debug!("rayon pool already initialized: {e}");
        }
    }
    #[cfg(not(feature = "parallel"))]
    if let Some(n) = requested {
        log::warn!("{THREADS_ENV}={n} requested but this build is sequential");
    }
}

/// Order-preserving parallel map (sequential without the feature).
#[cfg(feature = "parallel")]
pub fn par_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.into_par_iter().map(f).collect()
}

/// Order-preserving parallel map (sequential without the feature).
#[cfg(not(feature = "parallel"))]
pub fn par_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    items.into_iter().map(f).collect()
}

/// Always-sequential map with the same signature as [`par_map`], kept as
/// the benchmark baseline.
pub fn seq_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    items.into_iter().map(f).collect()
}
