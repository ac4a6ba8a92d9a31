//! Execution strategy for the data-parallel kernels.
//!
//! Every kernel that fans out over tiles, frames or Gaussians takes a
//! [`Parallelism`] and produces identical output under both strategies:
//! work items are independent and their results are gathered in input order.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parallelism {
    Serial,
    /// Uses rayon when the `parallel` feature is enabled, serial otherwise.
    #[default]
    Parallel,
}

impl Parallelism {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Parallel
    }
}

/// Maps `f` over `0..n`, returning results in index order.
pub fn map_range<T, F>(par: Parallelism, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if par.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = par;
    (0..n).map(f).collect()
}

/// Maps `f` over a slice, returning results in slice order.
pub fn map_slice<'a, S, T, F>(par: Parallelism, items: &'a [S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&'a S) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if par.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = par;
    items.iter().map(f).collect()
}

/// Runs `f` on each mutable chunk of `data` together with its chunk index.
pub fn for_each_chunk_mut<T, F>(par: Parallelism, data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if par.is_parallel() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = par;
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategies_agree() {
        let a = map_range(Parallelism::Serial, 1000, |i| (i as f64).sqrt());
        let b = map_range(Parallelism::Parallel, 1000, |i| (i as f64).sqrt());
        assert_eq!(a, b);

        let mut x = vec![0usize; 103];
        let mut y = x.clone();
        for_each_chunk_mut(Parallelism::Serial, &mut x, 10, |c, s| {
            s.iter_mut().for_each(|v| *v = c)
        });
        for_each_chunk_mut(Parallelism::Parallel, &mut y, 10, |c, s| {
            s.iter_mut().for_each(|v| *v = c)
        });
        assert_eq!(x, y);
    }
}
