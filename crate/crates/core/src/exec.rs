//! Sequential / rayon switch for the data-parallel loops.
//!
//! Every parallel loop in the workspace goes through [`Execution`] so that the
//! same binary can run both paths (the criterion benches compare them). Without
//! the `parallel` feature, [`Execution::Parallel`] silently runs sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// True when this value actually dispatches to rayon.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }

    /// Applies `f` to each `chunk`-sized piece of `data` together with the chunk index.
    pub fn for_each_chunk_mut<T, F>(self, data: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Send + Sync,
    {
        let chunk = chunk.max(1);
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            data.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }

    /// Maps `f` over `0..n`, preserving order.
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Send + Sync,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Maps `f` over `0..n` and folds the results with `reduce`, starting from `identity()`.
    ///
    /// The reduction order differs between the two paths, so floating point
    /// results may differ in the last bits.
    pub fn map_reduce<R, F, I, G>(self, n: usize, identity: I, f: F, reduce: G) -> R
    where
        R: Send,
        F: Fn(usize) -> R + Send + Sync,
        I: Fn() -> R + Send + Sync,
        G: Fn(R, R) -> R + Send + Sync,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return (0..n).into_par_iter().map(f).reduce(&identity, &reduce);
        }
        (0..n).map(f).fold(identity(), reduce)
    }
}
