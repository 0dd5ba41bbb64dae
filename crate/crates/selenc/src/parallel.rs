//! Execution strategy for the data-parallel loops (attack restarts, per-input
//! sensitivity columns, sweep cells).
//!
//! With the `parallel` feature (default) `Auto` fans work out over rayon's
//! pool; `Sequential` always runs in-order on the calling thread. Results are
//! collected in index order either way, so numeric output is identical across
//! strategies and thread counts.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    /// Parallel when the `parallel` feature is enabled, sequential otherwise.
    Auto,
    /// Force single-threaded execution.
    Sequential,
}

impl Default for Execution {
    fn default() -> Self {
        Execution::Auto
    }
}

/// Maps `f` over `0..n`, preserving index order in the returned vector.
pub fn map_collect<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Auto => (0..n).into_par_iter().map(f).collect(),
        #[cfg(not(feature = "parallel"))]
        Execution::Auto => (0..n).map(f).collect(),
        Execution::Sequential => (0..n).map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_preserved() {
        let seq = map_collect(Execution::Sequential, 100, |i| i * i);
        let auto = map_collect(Execution::Auto, 100, |i| i * i);
        assert_eq!(seq, auto);
        assert_eq!(seq[7], 49);
    }

    #[test]
    fn empty_range() {
        let v: Vec<usize> = map_collect(Execution::Auto, 0, |i| i);
        assert!(v.is_empty());
    }
}
