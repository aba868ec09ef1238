//! Batch-level data parallelism with a sequential fallback.
//!
//! Forward evaluation is pure given immutable weights, so independent inputs
//! fan out across threads. Results come back in input order, and callers
//! reduce them sequentially, so enabling or disabling the `parallel` feature
//! never changes any computed value.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps over a batch; parallel when the `parallel` feature is on.
#[cfg(feature = "parallel")]
pub fn map_batch<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_batch<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Always-sequential variant, kept callable so benchmarks can compare the
/// two paths under one build.
pub fn map_batch_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}
