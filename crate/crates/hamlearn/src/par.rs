//! Parallel execution helpers with a sequential fallback.
//!
//! All heavy loops in the crate (batch losses, Monte-Carlo trials, sweep cells,
//! ensemble members) are expressed through these helpers. With the `parallel`
//! feature (on by default) they fan out over rayon; without it they run inline.
//! Results are always collected in input order and reduced in a fixed sequence,
//! so outputs are bit-identical across thread counts and across the two builds.

/// Map a function over a slice, preserving order.
pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Map a function over an index range, preserving order.
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
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

/// Sequential variants, always available for direct comparison in benches.
pub mod seq {
    pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
    where
        F: Fn(&T) -> U,
    {
        items.iter().map(f).collect()
    }

    pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
    where
        F: Fn(usize) -> U,
    {
        (0..n).map(f).collect()
    }
}

/// Map an index range in fixed-size chunks and fold each chunk's results into
/// an accumulator in index order.
///
/// This bounds peak memory for long Monte-Carlo runs (only one chunk of
/// per-trial values is alive at a time) while keeping the merge order, and
/// therefore the floating-point result, independent of thread count.
pub fn chunked_fold<U, A, F, G>(n: usize, chunk: usize, init: A, f: F, mut merge: G) -> A
where
    U: Send,
    A: Send,
    F: Fn(usize) -> U + Sync + Send,
    G: FnMut(A, U) -> A,
{
    assert!(chunk > 0, "chunk size must be positive");
    let mut acc = init;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let buf: Vec<U> = {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                (start..end).into_par_iter().map(&f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                (start..end).map(&f).collect()
            }
        };
        for u in buf {
            acc = merge(acc, u);
        }
        start = end;
    }
    acc
}

/// Configure the global rayon pool to use `n` threads. No-op without the
/// `parallel` feature. Silently keeps the existing pool if one was already
/// built (rayon allows a single global configuration per process).
pub fn configure_threads(n: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
    }
}
