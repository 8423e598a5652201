//! Execution policy for the data-parallel loops.
//!
//! Every hot loop in the crate (voxel integration, objective sweeps, metric
//! binning, GLFS batches) goes through [`Exec`]. With the `parallel` feature
//! disabled, [`Exec::Parallel`] silently runs sequentially, so callers never
//! need their own `cfg` switches.
//!
//! Reductions always use fixed-size chunks merged in chunk order, so results
//! are bit-identical between the two policies and across thread counts.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Chunk length used by order-stable reductions.
pub const REDUCE_CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// True if this policy actually fans out to worker threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// Calls `f(chunk_index, chunk)` for consecutive `chunk_len` pieces of `data`.
    pub fn for_each_chunk_mut<T, F>(self, data: &mut [T], chunk_len: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        let chunk_len = chunk_len.max(1);
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            data.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
        data.chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }

    /// Ordered `(0..n).map(f).collect()`.
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Ordered map over fixed chunks of `len` items: `f(start, end)` per chunk.
    pub fn map_chunks<R, F>(self, len: usize, chunk_len: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize, usize) -> R + Sync + Send,
    {
        let chunk_len = chunk_len.max(1);
        let chunks = len.div_ceil(chunk_len);
        self.map_range(chunks, |c| {
            let start = c * chunk_len;
            f(start, (start + chunk_len).min(len))
        })
    }
}

/// Runs `f` inside a dedicated pool of `threads` workers.
///
/// Without the `parallel` feature this simply calls `f`.
pub fn with_threads<R: Send, F: FnOnce() -> R + Send>(threads: usize, f: F) -> R {
    #[cfg(feature = "parallel")]
    {
        match rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
        {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}
