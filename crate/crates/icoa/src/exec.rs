//! Execution-mode switch for the data-parallel layers.
//!
//! Replicated experiment cells and independent agent fits are embarrassingly
//! parallel; results are schedule-independent because every run derives its
//! RNG seed from (root seed, cell, replication). With the `parallel` feature
//! (on by default) [`ExecMode::Parallel`] fans work out over rayon; without
//! it the crate compiles with no rayon dependency and both modes run
//! sequentially.

use serde::Deserialize;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    #[default]
    Parallel,
    Sequential,
}

impl ExecMode {
    /// Maps `f` over `items`, preserving input order in the output.
    pub fn map<T, U, F>(self, items: Vec<T>, f: F) -> Vec<U>
    where
        T: Send,
        U: Send,
        F: Fn(T) -> U + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            ExecMode::Parallel => items.into_par_iter().map(f).collect(),
            #[cfg(not(feature = "parallel"))]
            ExecMode::Parallel => items.into_iter().map(f).collect(),
            ExecMode::Sequential => items.into_iter().map(f).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let xs: Vec<u64> = (0..100).collect();
        let seq = ExecMode::Sequential.map(xs.clone(), |x| x * x);
        let par = ExecMode::Parallel.map(xs, |x| x * x);
        assert_eq!(seq, par);
        assert_eq!(seq[9], 81);
    }
}
