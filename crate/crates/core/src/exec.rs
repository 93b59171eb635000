//! Data-parallel execution helpers.
//!
//! Independent work items (metric trials, image rendering, simulation
//! repeats) go through [`ExecMode::map`]. With the `parallel` feature the
//! default mode fans out over the rayon pool; without it, or with
//! [`ExecMode::Sequential`], items run in order on the calling thread.
//! Both paths return results in item order, so anything seeded per item is
//! bit-identical across modes.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    #[cfg_attr(feature = "parallel", default)]
    Parallel,
    #[cfg_attr(not(feature = "parallel"), default)]
    Sequential,
}

impl ExecMode {
    /// True when this mode will actually use the rayon pool.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == ExecMode::Parallel
    }

    /// Maps `f` over `0..n`, preserving order.
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        F: Fn(usize) -> R + Sync + Send,
        R: Send,
    {
        #[cfg(feature = "parallel")]
        if self == ExecMode::Parallel {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Fallible variant of [`ExecMode::map_range`]; the first error in item
    /// order is returned.
    pub fn try_map_range<R, E, F>(self, n: usize, f: F) -> Result<Vec<R>, E>
    where
        F: Fn(usize) -> Result<R, E> + Sync + Send,
        R: Send,
        E: Send,
    {
        self.map_range(n, f).into_iter().collect()
    }
}
