//! Data-parallel helpers with a deterministic sequential fallback.
//!
//! Every helper produces results in index order and reduces over fixed-size
//! chunks whose boundaries do not depend on the thread count, so parallel and
//! sequential execution give bit-identical output.

use std::cell::Cell;

/// Work items summed together before partial sums are combined.
pub const REDUCE_CHUNK: usize = 16;

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with data-parallel helpers forced onto the calling thread.
pub fn with_sequential<T>(f: impl FnOnce() -> T) -> T {
    let prev = FORCE_SEQUENTIAL.with(|c| c.replace(true));
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            FORCE_SEQUENTIAL.with(|c| c.set(self.0));
        }
    }
    let _restore = Restore(prev);
    f()
}

/// True when helpers called from this thread fan out to the rayon pool.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.with(Cell::get)
}

/// `(0..n).map(f).collect()`, possibly in parallel.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Fallible variant of [`map_indexed`]; returns the first error by index.
pub fn try_map_indexed<T, E, F>(n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_indexed(n, f).into_iter().collect()
}

/// Fills `out` in fixed-size row blocks, possibly in parallel.
pub fn fill_rows<F>(out: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    for (i, row) in out.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}

/// Sums `len`-vectors produced by `item(i, acc)` for `i in 0..n`.
///
/// `item` adds its contribution into `acc` and returns a scalar that is summed
/// alongside. Items are grouped into chunks of [`REDUCE_CHUNK`]; chunk sums are
/// then added left to right, independent of scheduling.
pub fn sum_indexed<F>(n: usize, len: usize, item: F) -> (f64, Vec<f64>)
where
    F: Fn(usize, &mut [f64]) -> f64 + Sync + Send,
{
    let chunks = n.div_ceil(REDUCE_CHUNK);
    let partials = map_indexed(chunks, |c| {
        let mut acc = vec![0.0; len];
        let mut scalar = 0.0;
        let end = ((c + 1) * REDUCE_CHUNK).min(n);
        for i in c * REDUCE_CHUNK..end {
            scalar += item(i, &mut acc);
        }
        (scalar, acc)
    });
    let mut total = vec![0.0; len];
    let mut scalar = 0.0;
    for (s, acc) in partials {
        scalar += s;
        for (t, a) in total.iter_mut().zip(&acc) {
            *t += a;
        }
    }
    (scalar, total)
}
