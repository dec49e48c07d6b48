//! Execution strategy for the data-parallel inner loops (batch gradients,
//! seed fan-out, GA population scoring).
//!
//! With the `parallel` feature the work is spread over the rayon pool;
//! without it every [`Exec`] value runs sequentially. Chunked reductions
//! always merge partial results in chunk order, so the floating-point result
//! is identical whatever the thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// Parallel when compiled with rayon support, otherwise sequential.
    pub fn auto() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }

    /// Fold fixed-size chunks independently, then merge the partial
    /// accumulators left to right.
    pub fn fold_chunks<T, A, I, F, M>(self, items: &[T], chunk: usize, init: I, fold: F, merge: M) -> A
    where
        T: Sync,
        A: Send,
        I: Fn() -> A + Sync + Send,
        F: Fn(&mut A, &T) + Sync + Send,
        M: Fn(&mut A, A),
    {
        let chunk = chunk.max(1);
        let run = |c: &[T]| {
            let mut acc = init();
            for item in c {
                fold(&mut acc, item);
            }
            acc
        };
        #[allow(unused_mut)]
        let mut partials: Option<Vec<A>> = None;
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            partials = Some(items.par_chunks(chunk).map(run).collect());
        }
        let partials = partials.unwrap_or_else(|| items.chunks(chunk).map(run).collect());
        let mut total = init();
        for p in partials {
            merge(&mut total, p);
        }
        total
    }
}

/// Configure the global worker pool from `FLEETSCHED_THREADS` when set.
pub fn init_thread_pool_from_env() {
    #[cfg(feature = "parallel")]
    if let Some(n) = std::env::var("FLEETSCHED_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_fold_is_order_stable() {
        let xs: Vec<f64> = (0..10_000).map(|i| (i as f64).sin() * 1e-3 + 1.0 / (i as f64 + 1.0)).collect();
        let sum = |e: Exec| e.fold_chunks(&xs, 64, || 0.0, |a, x| *a += *x, |a, b| *a += b);
        assert_eq!(sum(Exec::Sequential).to_bits(), sum(Exec::Parallel).to_bits());
    }

    #[test]
    fn map_preserves_order() {
        let xs: Vec<usize> = (0..1000).collect();
        assert_eq!(Exec::Parallel.map(&xs, |x| x * 2), Exec::Sequential.map(&xs, |x| x * 2));
    }
}
