//! Data-parallel execution helpers.
//!
//! With the `parallel` feature (default) the heavy kernels split work across
//! rayon threads. Without it everything runs sequentially. A runtime override
//! lets benches compare both modes inside one binary.
//!
//! Work is always split at fixed boundaries that do not depend on the thread
//! count, and per-chunk results are combined in chunk order, so results are
//! bit-identical between the parallel and sequential paths.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force sequential execution even when the `parallel` feature is enabled.
pub fn set_force_sequential(v: bool) {
    FORCE_SEQUENTIAL.store(v, Ordering::SeqCst);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// Apply `f` to fixed-size mutable chunks of `data`, in parallel when enabled.
/// `f` receives the chunk index and the chunk slice.
pub(crate) fn for_each_chunk_mut<E: Send, F>(data: &mut [E], chunk: usize, f: F)
where
    F: Fn(usize, &mut [E]) + Sync + Send,
{
    assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    if parallel_enabled() && data.len() > chunk {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Map chunk indices `0..n` to values, in parallel when enabled, preserving
/// index order in the returned vector.
pub(crate) fn map_indices<T: Send, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Chunk length used for elementwise kernels.
pub(crate) const ELEMENTWISE_CHUNK: usize = 32 * 1024;
