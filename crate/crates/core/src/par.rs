//! Row-parallel helpers. Every helper returns results in index order, so the
//! output is bitwise identical whether or not the `parallel` feature is on and
//! regardless of the thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// `(0..n).map(f).collect()`, fanned out over the rayon pool when enabled.
pub(crate) fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
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

/// Fills consecutive `width`-sized chunks of `out`; chunk `i` is written by `f(i, chunk)`.
pub(crate) fn fill_chunks<F>(out: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(width)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(width)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
    }
}
