//! Data-parallel execution helpers.
//!
//! With the `parallel` feature (default) the heavy inner loops fan out over a
//! rayon pool; without it everything runs sequentially. Both paths visit items
//! in index order when combining results, so outputs are bit-identical either
//! way. `SODAR_THREADS` caps the pool size; setting it to 1 forces the
//! sequential path even in parallel builds.

use std::sync::atomic::{AtomicU8, Ordering};

const MODE_UNSET: u8 = 0;
const MODE_SEQ: u8 = 1;
const MODE_PAR: u8 = 2;

static MODE: AtomicU8 = AtomicU8::new(MODE_UNSET);

#[cfg(feature = "parallel")]
fn init_mode() -> u8 {
    let threads = std::env::var("SODAR_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok());
    match threads {
        Some(0) | Some(1) => MODE_SEQ,
        Some(n) => {
            // Ignore the error if a global pool already exists.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
            MODE_PAR
        }
        None => MODE_PAR,
    }
}

#[cfg(not(feature = "parallel"))]
fn init_mode() -> u8 {
    MODE_SEQ
}

fn mode() -> u8 {
    let m = MODE.load(Ordering::Relaxed);
    if m != MODE_UNSET {
        return m;
    }
    let m = init_mode();
    MODE.store(m, Ordering::Relaxed);
    m
}

/// Returns true when work is currently fanned out over the rayon pool.
pub fn is_parallel() -> bool {
    mode() == MODE_PAR
}

/// Overrides the execution mode. Used by the benchmark suite to compare the
/// two paths in one process; `force_parallel(true)` is a no-op in builds
/// without the `parallel` feature.
pub fn force_parallel(enabled: bool) {
    let m = if enabled && cfg!(feature = "parallel") {
        MODE_PAR
    } else {
        MODE_SEQ
    };
    MODE.store(m, Ordering::Relaxed);
}

/// Maps `f` over `0..n`, collecting results in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Applies `f` to every element of `items` in parallel, in place.
pub fn for_each_mut<T, F>(items: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        items
            .par_iter_mut()
            .enumerate()
            .for_each(|(i, item)| f(i, item));
        return;
    }
    for (i, item) in items.iter_mut().enumerate() {
        f(i, item);
    }
}

/// Splits `out` into equal-size chunks and fills each with `f(chunk_idx, chunk)`.
/// `out.len()` must be a multiple of `chunk`.
pub fn fill_chunks<F>(out: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    debug_assert_eq!(out.len() % chunk.max(1), 0);
    #[cfg(feature = "parallel")]
    if is_parallel() && out.len() / chunk.max(1) > 1 {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in out.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}
