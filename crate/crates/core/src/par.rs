//! Thread control for the data-parallel kernels.
//!
//! Parallelism is organized so that results never depend on the number of
//! threads: work is split along independent output regions (batch samples,
//! channels, rows) and any reduction over those regions happens afterwards
//! in fixed index order. The `parallel` feature swaps the loop driver from a
//! plain iterator to a rayon pool; with the feature off, or with the thread
//! cap at 1, the same code runs sequentially.
//!
//! The cap is resolved once, in this order: explicit [`set_thread_cap`] call,
//! then the `LUMIPOWER_THREADS` environment variable, then all available
//! cores. A cap of 1 is the deterministic reference mode; every other mode
//! must produce bit-identical results to it.

use std::sync::atomic::{AtomicUsize, Ordering};

const UNSET: usize = usize::MAX;

static THREAD_CAP: AtomicUsize = AtomicUsize::new(UNSET);

/// Limits the worker count for all subsequent parallel sections. `0` means
/// "use all available cores". Overrides `LUMIPOWER_THREADS`.
pub fn set_thread_cap(cap: usize) {
    THREAD_CAP.store(cap, Ordering::SeqCst);
}

fn configured_cap() -> usize {
    let cap = THREAD_CAP.load(Ordering::SeqCst);
    if cap != UNSET {
        return cap;
    }
    match std::env::var("LUMIPOWER_THREADS") {
        Ok(v) => v.trim().parse::<usize>().unwrap_or(0),
        Err(_) => 0,
    }
}

/// Number of worker threads a parallel section would use right now. An
/// explicit cap is honored even beyond the physical core count; only the
/// automatic mode consults the machine.
pub fn effective_threads() -> usize {
    match configured_cap() {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        cap => cap,
    }
}

#[cfg(feature = "parallel")]
mod driver {
    use std::sync::{Arc, Mutex};

    /// One live pool, rebuilt when the requested size changes.
    fn pool(threads: usize) -> Arc<rayon::ThreadPool> {
        static POOL: Mutex<Option<(usize, Arc<rayon::ThreadPool>)>> = Mutex::new(None);
        let mut guard = POOL.lock().expect("pool lock poisoned");
        if let Some((n, p)) = guard.as_ref() {
            if *n == threads {
                return p.clone();
            }
        }
        let p = Arc::new(
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .expect("failed to build worker pool"),
        );
        *guard = Some((threads, p.clone()));
        p
    }

    /// Runs `f(i, chunk_i)` over consecutive `chunk`-sized pieces of `data`.
    /// Chunks are disjoint, so execution order cannot affect the outcome.
    pub fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync,
    {
        let threads = super::effective_threads();
        if threads <= 1 || data.len() <= chunk {
            for (i, c) in data.chunks_mut(chunk).enumerate() {
                f(i, c);
            }
        } else {
            use rayon::prelude::*;
            pool(threads).install(|| {
                data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
            });
        }
    }

    /// Evaluates `f(0..n)` and returns the results in index order. Reductions
    /// over the returned values are the caller's job and stay sequential.
    pub fn map_ordered<R, F>(n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        let threads = super::effective_threads();
        if threads <= 1 || n <= 1 {
            (0..n).map(f).collect()
        } else {
            use rayon::prelude::*;
            pool(threads).install(|| (0..n).into_par_iter().map(f).collect())
        }
    }
}

#[cfg(not(feature = "parallel"))]
mod driver {
    pub fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync,
    {
        for (i, c) in data.chunks_mut(chunk).enumerate() {
            f(i, c);
        }
    }

    pub fn map_ordered<R, F>(n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        (0..n).map(f).collect()
    }
}

pub(crate) use driver::{for_each_chunk, map_ordered};
