//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature these dispatch to rayon; without it they run
//! on the calling thread. Work is always split into the same fixed-size
//! pieces and partial results are combined in index order, so results are
//! bit-identical across thread counts and across both builds.

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
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

/// Map `f` over a slice, collecting results in order.
pub fn map_slice<S, T, F>(items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
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

/// Apply `f` to each `chunk`-sized row block of `out` (the last may be short).
pub fn for_each_chunk_mut<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Deterministic tree-free reduction: fold fixed blocks of `0..n` in
/// parallel, then combine the block results left to right.
pub fn fold_blocks<T, F, C>(n: usize, block: usize, init: impl Fn() -> T + Sync + Send, fold: F, combine: C) -> T
where
    T: Send,
    F: Fn(T, usize) -> T + Sync + Send,
    C: Fn(T, T) -> T,
{
    let block = block.max(1);
    let blocks = n.div_ceil(block);
    let partials = map_range(blocks, |b| {
        let start = b * block;
        let end = (start + block).min(n);
        (start..end).fold(init(), &fold)
    });
    partials.into_iter().fold(init(), combine)
}
