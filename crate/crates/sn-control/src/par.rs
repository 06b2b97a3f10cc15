//! Thin switch between rayon and sequential execution.
//!
//! Parallelism is only applied to element-wise node loops whose outputs land
//! in disjoint slots, so the `parallel` feature never changes results.
//! Reductions stay sequential everywhere in the crate.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum number of chunks before a node loop is worth farming out.
#[cfg(feature = "parallel")]
const PAR_CHUNK_THRESHOLD: usize = 32;

/// Apply `f` to each `chunk`-sized slice of `out`, indexed by chunk position.
pub(crate) fn for_each_chunk_mut<F>(out: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert_eq!(out.len() % chunk, 0);
    #[cfg(feature = "parallel")]
    {
        if out.len() / chunk >= PAR_CHUNK_THRESHOLD {
            out.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(j, c)| f(j, c));
            return;
        }
    }
    for (j, c) in out.chunks_mut(chunk).enumerate() {
        f(j, c);
    }
}

/// Apply `f` to aligned `chunk`-sized slices of three buffers of equal length.
pub(crate) fn zip3_chunks_mut<F>(a: &mut [f64], b: &mut [f64], c: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64], &mut [f64], &mut [f64]) + Sync + Send,
{
    debug_assert!(a.len() == b.len() && b.len() == c.len());
    #[cfg(feature = "parallel")]
    {
        if a.len() / chunk >= PAR_CHUNK_THRESHOLD {
            a.par_chunks_mut(chunk)
                .zip(b.par_chunks_mut(chunk))
                .zip(c.par_chunks_mut(chunk))
                .enumerate()
                .for_each(|(j, ((x, y), z))| f(j, x, y, z));
            return;
        }
    }
    for (j, ((x, y), z)) in a
        .chunks_mut(chunk)
        .zip(b.chunks_mut(chunk))
        .zip(c.chunks_mut(chunk))
        .enumerate()
    {
        f(j, x, y, z);
    }
}

/// Map `f` over `0..n`, preserving order of results.
pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if n > 1 {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}
