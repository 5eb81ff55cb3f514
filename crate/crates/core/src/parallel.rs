//! Execution policy for the data-parallel kernels.
//!
//! Work is split per batch item (or per sample) and results are reduced in a
//! fixed order, so the choice of policy never changes a single output bit.

use std::sync::atomic::{AtomicBool, Ordering};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    Parallel,
}

static SEQUENTIAL: AtomicBool = AtomicBool::new(!cfg!(feature = "parallel"));

/// Process-wide policy. Without the `parallel` feature this is a no-op.
pub fn set_parallelism(p: Parallelism) {
    SEQUENTIAL.store(p == Parallelism::Sequential || !cfg!(feature = "parallel"), Ordering::Relaxed);
}

pub fn parallelism() -> Parallelism {
    if SEQUENTIAL.load(Ordering::Relaxed) {
        Parallelism::Sequential
    } else {
        Parallelism::Parallel
    }
}

/// `(0..n).map(f)` with results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallelism() == Parallelism::Parallel && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
