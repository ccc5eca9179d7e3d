// SPDX-License-Identifier: Apache-2.0

//! Fan-out helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) work items are spread over a
//! dedicated rayon pool. Most fan-out here is blocking I/O against the
//! container engine, so the pool is sized independently of the core count.
//! Without the feature, or with [`Mode::Sequential`], items run in order on
//! the calling thread.

use std::sync::OnceLock;

/// How a fan-out runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    Sequential,
    #[default]
    Parallel,
}

impl Mode {
    /// `Parallel` when the crate was built with the `parallel` feature.
    pub fn best_available() -> Self {
        if cfg!(feature = "parallel") {
            Mode::Parallel
        } else {
            Mode::Sequential
        }
    }
}

/// Worker count for I/O fan-out; `VEMUL_FANOUT_THREADS` overrides.
pub fn fanout_threads() -> usize {
    static THREADS: OnceLock<usize> = OnceLock::new();
    *THREADS.get_or_init(|| {
        std::env::var("VEMUL_FANOUT_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
            .filter(|n: &usize| *n > 0)
            .unwrap_or(32)
    })
}

#[cfg(feature = "parallel")]
fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(fanout_threads())
            .thread_name(|i| format!("vemul-fanout-{i}"))
            .build()
            .expect("fan-out pool")
    })
}

/// Maps `f` over `items`, preserving order.
pub fn map<T, R, F>(mode: Mode, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode == Mode::Parallel && items.len() > 1 {
        use rayon::prelude::*;
        return pool().install(|| items.par_iter().map(&f).collect());
    }
    let _ = mode;
    items.iter().map(f).collect()
}

/// Sum of `f` over `items` (compensated, so the result does not depend on
/// how the work was split).
pub fn sum<T, F>(mode: Mode, items: &[T], f: F) -> f64
where
    T: Sync,
    F: Fn(&T) -> f64 + Sync + Send,
{
    let parts = map(mode, items, f);
    kahan_sum(parts.iter().copied())
}

pub fn kahan_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order_in_both_modes() {
        let items: Vec<u32> = (0..100).collect();
        let seq = map(Mode::Sequential, &items, |x| x * 2);
        let par = map(Mode::Parallel, &items, |x| x * 2);
        assert_eq!(seq, par);
        assert_eq!(seq[99], 198);
    }

    #[test]
    fn sum_matches_between_modes() {
        let items: Vec<f64> = (0..1000).map(|i| i as f64 * 0.1).collect();
        let a = sum(Mode::Sequential, &items, |x| *x);
        let b = sum(Mode::Parallel, &items, |x| *x);
        assert_eq!(a, b);
    }
}
