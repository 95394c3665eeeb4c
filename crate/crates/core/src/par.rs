//! Ordered parallel map over independent work items.
//!
//! Results come back in index order regardless of scheduling; callers reduce
//! them sequentially so floating-point sums are independent of thread count.

#[cfg(feature = "parallel")]
pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Number of rows handled by one task in row-parallel reductions.
pub(crate) const ROW_BLOCK: usize = 4096;

/// Sums `width`-wide row contributions `f(i, acc)` over `0..n` in fixed
/// blocks, combining block totals in block order.
pub(crate) fn sum_rows<F>(n: usize, width: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let parts = map_indexed(n.div_ceil(ROW_BLOCK), |b| {
        let mut acc = vec![0.0; width];
        for i in b * ROW_BLOCK..((b + 1) * ROW_BLOCK).min(n) {
            f(i, &mut acc);
        }
        acc
    });
    let mut total = vec![0.0; width];
    for p in parts {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}
