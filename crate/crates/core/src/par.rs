// SPDX-License-Identifier: MIT OR Apache-2.0

//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the helpers fan out over rayon's
//! global pool, or over a dedicated pool when an [`Executor`] is built with an
//! explicit thread count. Without the feature everything runs on the calling
//! thread. Results are always returned in input order, and every item is
//! computed by the same arithmetic regardless of the thread it lands on, so
//! outputs are bitwise identical across worker counts.

use crate::error::{ProbeError, Result};

/// Minimum multiply-add count before a matrix product is split across threads.
pub(crate) const PAR_WORK_THRESHOLD: usize = 1 << 16;

/// Order-preserving map over a slice using the ambient pool.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Order-preserving map over `0..n` using the ambient pool.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Fill `out` in chunks of `chunk` elements, one closure call per chunk.
pub(crate) fn fill_chunks<F>(out: &mut [f64], chunk: usize, parallel: bool, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = parallel;
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// A worker pool of fixed size.
///
/// Work submitted through an executor, including nested lens projections, runs
/// on its own pool of `threads` workers. [`Executor::sequential`] (or a build
/// without the `parallel` feature) runs the outer loop on the calling thread
/// with plain iterators.
pub struct Executor {
    threads: usize,
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor").field("threads", &self.threads).finish()
    }
}

impl Executor {
    /// Build an executor. `threads = 0` means available parallelism.
    pub fn new(threads: usize) -> Result<Self> {
        let threads = if threads == 0 {
            std::thread::available_parallelism().map_or(1, usize::from)
        } else {
            threads
        };
        #[cfg(feature = "parallel")]
        {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| ProbeError::Config(format!("thread pool: {e}")))?;
            Ok(Self {
                threads,
                pool: Some(pool),
            })
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = ProbeError::Config;
            Ok(Self { threads })
        }
    }

    /// Single-threaded executor.
    pub fn sequential() -> Self {
        Self {
            threads: 1,
            #[cfg(feature = "parallel")]
            pool: None,
        }
    }

    /// Configured thread count.
    pub fn threads(&self) -> usize {
        self.threads
    }

    /// Order-preserving map.
    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.install(|| map(items, f));
        }
        items.iter().map(f).collect()
    }

    /// Run `f` inside this executor's pool so nested helpers use it too.
    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.install(f);
        }
        f()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let v: Vec<usize> = (0..1000).collect();
        let out = map(&v, |x| x * 2);
        assert_eq!(out, v.iter().map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn executor_matches_sequential() {
        let v: Vec<f64> = (0..257).map(|i| i as f64 * 0.37).collect();
        let seq = Executor::sequential().map(&v, |x| x.sin());
        let par = Executor::new(4).unwrap().map(&v, |x| x.sin());
        assert_eq!(seq, par);
    }
}
