//! Execution strategy for data-parallel inner loops.
//!
//! Every parallel entry point in the crate goes through [`Parallelism`]. With the
//! `parallel` feature disabled, [`Parallelism::Parallel`] silently degrades to the
//! sequential path so callers never need their own `cfg` gates. Results are always
//! collected by index, so the output of a map is identical under either mode.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How data-parallel loops are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Parallelism {
    Sequential,
    Parallel,
}

impl Default for Parallelism {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Parallelism::Parallel
        } else {
            Parallelism::Sequential
        }
    }
}

impl Parallelism {
    /// True when this mode will actually fan out across threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Parallel
    }

    /// Maps `f` over `0..n`, returning results in index order.
    pub fn map_range<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Parallelism::Parallel {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Maps `f` over a mutable slice, returning results in slice order.
    pub fn map_mut<I, T, F>(self, items: &mut [I], f: F) -> Vec<T>
    where
        I: Send,
        T: Send,
        F: Fn(usize, &mut I) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Parallelism::Parallel {
            return items
                .par_iter_mut()
                .enumerate()
                .map(|(i, it)| f(i, it))
                .collect();
        }
        items
            .iter_mut()
            .enumerate()
            .map(|(i, it)| f(i, it))
            .collect()
    }

    /// Fills `out` in chunks of `chunk` elements; `f` receives the chunk index.
    pub fn for_each_chunk_mut<T, F>(self, out: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        let chunk = chunk.max(1);
        #[cfg(feature = "parallel")]
        if self == Parallelism::Parallel {
            out.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
        out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_on_ordered_map() {
        let f = |i: usize| i * i + 1;
        assert_eq!(
            Parallelism::Sequential.map_range(1000, f),
            Parallelism::Parallel.map_range(1000, f)
        );
    }

    #[test]
    fn chunked_fill_is_mode_independent() {
        let mut a = vec![0usize; 97];
        let mut b = vec![0usize; 97];
        let fill = |i: usize, c: &mut [usize]| {
            for (k, v) in c.iter_mut().enumerate() {
                *v = i * 10 + k;
            }
        };
        Parallelism::Sequential.for_each_chunk_mut(&mut a, 10, fill);
        Parallelism::Parallel.for_each_chunk_mut(&mut b, 10, fill);
        assert_eq!(a, b);
    }
}
