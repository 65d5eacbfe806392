//! Execution mode: data-parallel (rayon, behind the `parallel` feature) or
//! sequential. Every parallel map here writes results by index, and callers
//! reduce them in index order, so both modes produce bitwise-identical output.

use std::sync::atomic::{AtomicBool, Ordering};

static SINGLE_THREAD: AtomicBool = AtomicBool::new(false);

/// Forces sequential execution process-wide (the CLI's `--single-thread`).
pub fn set_single_thread(on: bool) {
    SINGLE_THREAD.store(on, Ordering::SeqCst);
}

pub fn is_single_thread() -> bool {
    SINGLE_THREAD.load(Ordering::SeqCst) || !cfg!(feature = "parallel")
}

/// Maps `f` over `0..n`, in parallel when enabled.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    if is_single_thread() || n < 2 {
        return map_sequential(n, f);
    }
    map_parallel(n, f)
}

pub fn map_sequential<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R,
{
    (0..n).map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_parallel<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_parallel<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    map_sequential(n, f)
}

/// Like [`map_indexed`] but short-circuits on the first error in index order.
pub fn try_map_indexed<R, E, F>(n: usize, f: F) -> Result<Vec<R>, E>
where
    R: Send,
    E: Send,
    F: Fn(usize) -> Result<R, E> + Sync + Send,
{
    map_indexed(n, f).into_iter().collect()
}
