//! Execution policy for the data-parallel inner loops.
//!
//! Every parallel site in the crate goes through [`Execution::map`], which
//! always returns results in index order. Reductions over those results are
//! done sequentially by the caller, so a run produces bit-identical numbers
//! whichever policy is selected.
//!
//! With the `parallel` feature disabled, [`Execution::Parallel`] silently
//! degrades to the sequential path.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// Whether this policy actually fans out on the current build.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }

    /// Evaluate `f(0..n)` and collect the results in index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Execution::Parallel && n > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Like [`Execution::map`] over fixed-size chunks of `0..n`, for loops
    /// whose per-item work is too small to schedule individually.
    pub fn map_chunks<T, F>(self, n: usize, chunk: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
    {
        let chunk = chunk.max(1);
        let count = n.div_ceil(chunk);
        self.map(count, |c| {
            let start = c * chunk;
            f(start..(start + chunk).min(n))
        })
    }

    /// Call `f(i, slice)` on consecutive `width`-sized slices of `buf`, in place.
    pub fn fill_chunks<T, F>(self, buf: &mut [T], width: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        let width = width.max(1);
        #[cfg(feature = "parallel")]
        if self == Execution::Parallel && buf.len() > width {
            use rayon::prelude::*;
            buf.par_chunks_mut(width)
                .enumerate()
                .for_each(|(i, s)| f(i, s));
            return;
        }
        buf.chunks_mut(width).enumerate().for_each(|(i, s)| f(i, s));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        for exec in [Execution::Sequential, Execution::Parallel] {
            let out = exec.map(100, |i| i * i);
            assert_eq!(out, (0..100).map(|i| i * i).collect::<Vec<_>>());
        }
    }

    #[test]
    fn map_chunks_covers_range() {
        let out = Execution::Parallel.map_chunks(10, 3, |r| r.collect::<Vec<_>>());
        let flat: Vec<usize> = out.into_iter().flatten().collect();
        assert_eq!(flat, (0..10).collect::<Vec<_>>());
        assert!(Execution::Sequential
            .map_chunks(0, 4, |r| r.len())
            .is_empty());
    }

    #[test]
    fn fill_chunks_visits_every_slice() {
        for exec in [Execution::Sequential, Execution::Parallel] {
            let mut buf = vec![0usize; 10];
            exec.fill_chunks(&mut buf, 4, |i, s| s.iter_mut().for_each(|v| *v = i));
            assert_eq!(buf, [0, 0, 0, 0, 1, 1, 1, 1, 2, 2]);
        }
    }
}
