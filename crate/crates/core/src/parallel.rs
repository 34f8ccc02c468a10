//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper splits work into chunks whose size depends only on the
//! problem size, never on the thread count, and reduces partial results in
//! chunk order. Results are therefore bit-identical with and without the
//! `parallel` feature and for any rayon pool size.

/// Elements per chunk for elementwise kernels.
pub(crate) const ELEM_CHUNK: usize = 1 << 14;

/// Rows per chunk for a kernel over rows of length `row_len`.
pub(crate) fn rows_per_chunk(row_len: usize) -> usize {
    (ELEM_CHUNK / row_len.max(1)).max(1)
}

/// Apply `f(chunk_index, chunk)` to consecutive `chunk_len`-sized chunks.
pub(crate) fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk_len = chunk_len.max(1);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if data.len() > chunk_len {
            data.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Map `f` over `0..n` and collect in index order.
pub(crate) fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if n > 1 {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Fixed-order chunked sum of `f(i)` over `0..n`.
pub(crate) fn chunked_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let chunks = n.div_ceil(ELEM_CHUNK);
    let partials = map_indices(chunks, |c| {
        let lo = c * ELEM_CHUNK;
        let hi = (lo + ELEM_CHUNK).min(n);
        (lo..hi).map(&f).sum::<f64>()
    });
    partials.into_iter().sum()
}

/// Run `f` on a single-threaded pool when `parallel` is enabled, otherwise
/// just run it. Used for deterministic runs and sequential benchmarks.
pub fn run_single_threaded<R: Send, F: FnOnce() -> R + Send>(f: F) -> R {
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .expect("single-thread pool");
        pool.install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        f()
    }
}

/// Number of worker threads used by the data-parallel kernels.
pub fn worker_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_sum_matches_single_thread() {
        let n = 3 * ELEM_CHUNK + 17;
        let f = |i: usize| ((i as f64) * 0.37).sin();
        let a = chunked_sum(n, f);
        let b = run_single_threaded(|| chunked_sum(n, f));
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn map_indices_keeps_order() {
        let v = map_indices(1000, |i| i * 2);
        assert!(v.iter().enumerate().all(|(i, &x)| x == 2 * i));
    }
}
