//! Data-parallel helpers with a sequential fallback.
//!
//! Results are always collected in input order and reduced sequentially, so a
//! computation returns bit-identical values whichever mode runs it. Without the
//! `parallel` feature every mode runs sequentially.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    Rayon,
}

static DEFAULT_MODE: AtomicU8 = AtomicU8::new(1);

impl Parallelism {
    /// Process-wide default, initially `Rayon` when the feature is enabled.
    pub fn current() -> Self {
        if cfg!(feature = "parallel") && DEFAULT_MODE.load(Ordering::Relaxed) == 1 {
            Parallelism::Rayon
        } else {
            Parallelism::Sequential
        }
    }

    pub fn set_current(mode: Parallelism) {
        DEFAULT_MODE.store(matches!(mode, Parallelism::Rayon) as u8, Ordering::Relaxed);
    }
}

/// Ordered map over a slice.
pub fn map<T, R, F>(mode: Parallelism, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}

/// Ordered map over `0..n`.
pub fn map_range<R, F>(mode: Parallelism, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Splits `items` into fixed-size chunks, maps each chunk, and returns the
/// per-chunk results in order. Chunk boundaries do not depend on the mode.
pub fn map_chunks<T, R, F>(mode: Parallelism, items: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> R + Sync + Send,
{
    let chunk = chunk.max(1);
    match mode {
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => {
            use rayon::prelude::*;
            items.par_chunks(chunk).map(f).collect()
        }
        _ => items.chunks(chunk).map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_bitwise() {
        let xs: Vec<f64> = (0..10_000).map(|i| (i as f64 * 0.37).sin()).collect();
        let sum = |mode| -> f64 {
            map_chunks(mode, &xs, 97, |c| c.iter().map(|x| x * x).sum::<f64>())
                .into_iter()
                .sum()
        };
        assert_eq!(sum(Parallelism::Sequential).to_bits(), sum(Parallelism::Rayon).to_bits());
        let a = map_range(Parallelism::Sequential, 50, |i| i * i);
        let b = map_range(Parallelism::Rayon, 50, |i| i * i);
        assert_eq!(a, b);
    }
}
