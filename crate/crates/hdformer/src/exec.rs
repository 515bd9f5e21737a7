//! Thread-pool executor for per-segment work.

use hdformer_core::train::Executor;
use rayon::prelude::*;

/// Runs jobs on the global rayon pool; results keep index order.
#[derive(Debug, Clone, Copy, Default)]
pub struct Parallel;

impl Executor for Parallel {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).into_par_iter().map(f).collect()
    }
}
