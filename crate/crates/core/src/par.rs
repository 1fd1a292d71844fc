//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) these dispatch to rayon; without it
//! they run the same closures sequentially. Every helper produces its output in
//! index order and never reduces across threads, so results are bit-identical
//! in both builds and for any thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work size (in scalar operations) below which the parallel build stays
/// sequential; rayon's per-task overhead dominates for small matrices.
pub const MIN_PARALLEL_WORK: usize = 1 << 15;

/// Returns true when this build dispatches to rayon.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// `(0..n).map(f).collect()`, possibly in parallel.
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Writes `out[i] = f(i)`. Runs in parallel only when `work` is large enough.
pub fn fill<T, F>(out: &mut [T], work: usize, f: F)
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if work >= MIN_PARALLEL_WORK {
            out.par_iter_mut()
                .enumerate()
                .for_each(|(i, slot)| *slot = f(i));
            return;
        }
    }
    let _ = work;
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = f(i);
    }
}

/// Caps the global worker pool. A no-op in sequential builds; returns an error
/// message if the global pool was already initialised.
pub fn init_threads(threads: usize) -> std::result::Result<(), String> {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| e.to_string())
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        Ok(())
    }
}

/// Number of worker threads the helpers may use.
pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}
