//! Sequential / data-parallel execution switch.
//!
//! Every hot loop in the crate (per-sentence completion, K-Means restarts,
//! per-type selection, embedding chunks) maps an independent closure over a
//! slice and collects the results in input order. [`Execution`] picks how
//! that map runs. Results are identical in both modes; only wall time changes.

/// How a data-parallel map is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    /// Plain in-order iteration on the calling thread.
    Sequential,
    /// Rayon work-stealing on the global pool. Without the `parallel`
    /// feature this silently degrades to [`Execution::Sequential`].
    #[default]
    Parallel,
}

impl Execution {
    /// True when this build can actually run in parallel.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }

    /// Map `f` over `items`, preserving order.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Execution::Parallel {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }

    /// Like [`Execution::map`] but with at most `limit` closures in flight.
    /// Used for network-bound fan-out where the bound matters more than
    /// core count.
    pub fn map_bounded<T, R, F>(self, items: &[T], limit: usize, f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Execution::Parallel && limit > 1 {
            use rayon::prelude::*;
            match rayon::ThreadPoolBuilder::new().num_threads(limit).build() {
                Ok(pool) => return pool.install(|| items.par_iter().map(&f).collect()),
                Err(err) => tracing::warn!("falling back to sequential map: {err}"),
            }
        }
        let _ = limit;
        items.iter().map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let xs: Vec<u64> = (0..1000).collect();
        let seq = Execution::Sequential.map(&xs, |x| x * x + 1);
        let par = Execution::Parallel.map(&xs, |x| x * x + 1);
        let bounded = Execution::Parallel.map_bounded(&xs, 3, |x| x * x + 1);
        assert_eq!(seq, par);
        assert_eq!(seq, bounded);
    }

    #[test]
    fn sequential_is_never_parallel() {
        assert!(!Execution::Sequential.is_parallel());
    }
}
