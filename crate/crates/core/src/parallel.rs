//! Data-parallel helpers with a sequential fallback.
//!
//! Parallelism is only applied where each output element is a pure function
//! of the inputs (row slabs, per-item maps), so results are bit-identical to
//! the sequential path regardless of thread count. Reductions that would be
//! order-sensitive are always folded in index order.
//!
//! The `parallel` feature (on by default) backs these with rayon; without it
//! every helper degrades to a plain loop. The `*_seq` variants are always
//! sequential and exist so benchmarks can compare both paths in one build.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f` to each `row_len`-sized row of `buf`, in parallel when enabled.
pub fn for_each_row<T, F>(buf: &mut [T], row_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert!(row_len > 0 && buf.len() % row_len == 0);
    #[cfg(feature = "parallel")]
    {
        buf.par_chunks_mut(row_len).enumerate().for_each(|(y, row)| f(y, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (y, row) in buf.chunks_mut(row_len).enumerate() {
            f(y, row);
        }
    }
}

/// Sequential counterpart of [`for_each_row`].
pub fn for_each_row_seq<T, F>(buf: &mut [T], row_len: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    debug_assert!(row_len > 0 && buf.len() % row_len == 0);
    for (y, row) in buf.chunks_mut(row_len).enumerate() {
        f(y, row);
    }
}

/// Map items to results, preserving input order.
pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Sequential counterpart of [`map_collect`].
pub fn map_collect_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Map indices `0..n` to results, preserving index order.
pub fn map_indices<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_rows_match_sequential() {
        let mut a = vec![0u64; 64 * 16];
        let mut b = a.clone();
        let f = |y: usize, row: &mut [u64]| {
            for (x, v) in row.iter_mut().enumerate() {
                *v = (y as u64) * 1_000_003 + x as u64;
            }
        };
        for_each_row(&mut a, 16, f);
        for_each_row_seq(&mut b, 16, f);
        assert_eq!(a, b);
    }

    #[test]
    fn map_preserves_order() {
        let items: Vec<usize> = (0..100).collect();
        let out = map_collect(&items, |&x| x * 2);
        assert_eq!(out, map_collect_seq(&items, |&x| x * 2));
    }
}
