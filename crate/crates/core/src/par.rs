use std::ops::Range;

/// Splits `0..len` into at most `max_blocks` contiguous ranges whose layout
/// depends only on `len`, so reductions over the results are deterministic
/// regardless of thread scheduling.
pub(crate) fn blocks(len: usize, max_blocks: usize) -> Vec<Range<usize>> {
    if len == 0 {
        return Vec::new();
    }
    let size = len.div_ceil(max_blocks.max(1)).max(1);
    (0..len)
        .step_by(size)
        .map(|s| s..(s + size).min(len))
        .collect()
}

/// Maps `f` over the blocks of `0..len`, in parallel when enabled; results
/// are returned in block order.
pub(crate) fn map_blocks<T, F>(len: usize, max_blocks: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
{
    let ranges = blocks(len, max_blocks);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        ranges.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        ranges.into_iter().map(f).collect()
    }
}

/// Order-preserving map over a slice.
pub(crate) fn map_items<I, T, F>(items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
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
