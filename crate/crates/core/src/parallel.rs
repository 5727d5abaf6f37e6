//! Order-preserving data-parallel map.
//!
//! With the `parallel` feature (on by default) [`Execution::Parallel`] fans
//! work out over the rayon pool; without it every mode runs sequentially.
//! Results always come back in input order, and callers reduce them in that
//! order, so seeded runs are bit-identical across modes and thread counts.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// Whether this build can actually run [`Execution::Parallel`] in parallel.
    pub fn parallel_available() -> bool {
        cfg!(feature = "parallel")
    }
}

/// `items.iter().enumerate().map(f).collect()`, possibly in parallel.
pub fn map_ordered<T, R, F>(items: &[T], mode: Execution, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
        }
        _ => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
    }
}
