//! Conditional data parallelism.
//!
//! Hot loops (convolution forward/backward, fully connected layers) run over
//! disjoint output chunks. With the `parallel` feature (default) the chunks go
//! through rayon; without it, or after [`set_parallel_enabled`]`(false)`, the
//! identical closures run sequentially. Chunk boundaries and per-chunk
//! arithmetic order are the same either way, so results are bit-identical
//! across modes and thread counts.

#[cfg(feature = "parallel")]
mod imp {
    use rayon::prelude::*;
    use std::sync::atomic::{AtomicBool, Ordering};

    static ENABLED: AtomicBool = AtomicBool::new(true);

    /// Toggle rayon dispatch at runtime. Off means sequential loops.
    pub fn set_parallel_enabled(on: bool) {
        ENABLED.store(on, Ordering::Relaxed);
    }

    /// True when work is currently dispatched through rayon.
    pub fn parallel_enabled() -> bool {
        ENABLED.load(Ordering::Relaxed)
    }

    /// Apply `f` to every `chunk`-sized slice of `data` (last may be short),
    /// passing the chunk index.
    pub fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Send + Sync,
    {
        if parallel_enabled() {
            data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        } else {
            data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        }
    }
}

#[cfg(not(feature = "parallel"))]
mod imp {
    /// No-op without the `parallel` feature; loops are always sequential.
    pub fn set_parallel_enabled(_on: bool) {}

    /// Always false without the `parallel` feature.
    pub fn parallel_enabled() -> bool {
        false
    }

    pub fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Send + Sync,
    {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

pub use imp::{for_each_chunk, parallel_enabled, set_parallel_enabled};
