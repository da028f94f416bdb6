//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper produces results in index order, so the output is identical
//! whichever execution mode runs it. The `parallel` feature (on by default)
//! enables the rayon path.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How a data-parallel loop is executed. Defaults to rayon when available.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Mode {
    #[cfg_attr(not(feature = "parallel"), default)]
    Sequential,
    #[cfg(feature = "parallel")]
    #[default]
    Rayon,
}

/// Evaluates `f(0..n)` and collects the results in index order.
pub fn map_indexed<T, F>(mode: Mode, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode {
        Mode::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Mode::Rayon => (0..n).into_par_iter().map(f).collect(),
    }
}

/// Applies `f(row_index, row)` to every `width`-sized chunk of `data`.
pub fn for_each_row_mut<F>(mode: Mode, data: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    match mode {
        Mode::Sequential => data.chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row)),
        #[cfg(feature = "parallel")]
        Mode::Rayon => data.par_chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row)),
    }
}

/// Runs `f` inside a pool limited to `jobs` threads (sequential mode ignores it).
pub fn with_jobs<T, F>(jobs: usize, f: F) -> T
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    #[cfg(feature = "parallel")]
    {
        match rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = jobs;
        f()
    }
}
