//! Execution strategy for the data-parallel loops (gallery scoring, per-pair
//! training work, corpus rendering, large matrix products).
//!
//! With the `parallel` feature the loops run on the rayon pool; without it, or
//! when [`Execution::Sequential`] is selected at runtime, they run in order on
//! the calling thread. Results are always collected in input order and every
//! reduction downstream is performed sequentially, so both strategies produce
//! bit-identical outputs.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

static MODE: AtomicU8 = AtomicU8::new(1);

pub fn set_execution(mode: Execution) {
    MODE.store(
        match mode {
            Execution::Sequential => 0,
            Execution::Parallel => 1,
        },
        Ordering::Relaxed,
    );
}

/// The strategy actually in effect. Always `Sequential` when the crate was
/// built without the `parallel` feature.
pub fn execution() -> Execution {
    if cfg!(feature = "parallel") && MODE.load(Ordering::Relaxed) == 1 {
        Execution::Parallel
    } else {
        Execution::Sequential
    }
}

/// Runs `f` with the given strategy, restoring the previous one afterwards.
pub fn with_execution<R>(mode: Execution, f: impl FnOnce() -> R) -> R {
    let prev = MODE.load(Ordering::Relaxed);
    set_execution(mode);
    let out = f();
    MODE.store(prev, Ordering::Relaxed);
    out
}

/// Order-preserving map over `0..n`.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if execution() == Execution::Parallel && n > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Order-preserving map over a slice.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    map_range(items.len(), |i| f(&items[i]))
}

/// Order-preserving map that consumes its items.
pub fn map_owned<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if execution() == Execution::Parallel && items.len() > 1 {
            use rayon::prelude::*;
            return items.into_par_iter().map(f).collect();
        }
    }
    items.into_iter().map(f).collect()
}

/// Applies `f(row_index, row)` to consecutive `width`-sized rows of `out`.
pub(crate) fn for_each_row<F>(out: &mut [f64], width: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        const MIN_WORK: usize = 1 << 18;
        if execution() == Execution::Parallel && work >= MIN_WORK {
            use rayon::prelude::*;
            out.par_chunks_mut(width)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    let _ = work;
    for (i, row) in out.chunks_mut(width).enumerate() {
        f(i, row);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order_under_both_strategies() {
        let items: Vec<u64> = (0..100).collect();
        let seq = with_execution(Execution::Sequential, || map(&items, |x| x * x));
        let par = with_execution(Execution::Parallel, || map(&items, |x| x * x));
        assert_eq!(seq, par);
        assert_eq!(seq[7], 49);
    }
}
