//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper guarantees the same element-wise evaluation order inside each
//! work unit, so parallel and sequential builds produce bit-identical floats.
//! Reductions are never parallelized; callers collect per-unit results in
//! index order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Map `f` over `0..n`, collecting results in index order.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Run `f` on each equally sized chunk of `out`; chunk `i` covers
/// `out[i*chunk .. (i+1)*chunk]`. `out.len()` must be a multiple of `chunk`.
#[cfg(feature = "parallel")]
pub fn for_each_chunk_mut<F>(out: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    debug_assert_eq!(out.len() % chunk.max(1), 0);
    out.par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Run `f` on each equally sized chunk of `out`; chunk `i` covers
/// `out[i*chunk .. (i+1)*chunk]`. `out.len()` must be a multiple of `chunk`.
#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk_mut<F>(out: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    debug_assert_eq!(out.len() % chunk.max(1), 0);
    for (i, c) in out.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Sequential twin of [`for_each_chunk_mut`], kept callable from benches so
/// the two code paths can be compared under identical inputs.
pub fn for_each_chunk_mut_seq<F>(out: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    debug_assert_eq!(out.len() % chunk.max(1), 0);
    for (i, c) in out.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Sequential twin of [`map_indexed`].
pub fn map_indexed_seq<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).map(f).collect()
}
