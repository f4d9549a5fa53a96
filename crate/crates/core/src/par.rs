//! Order-preserving data-parallel maps.
//!
//! Every parallel computation in the crate is a map over an index range whose
//! results are collected in index order and then reduced sequentially by the
//! caller, so results never depend on the thread count or the schedule.
//! With the `parallel` feature disabled, or in [`Mode::Sequential`], the maps
//! run on the calling thread.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    Parallel,
}

static MODE: AtomicU8 = AtomicU8::new(1);

pub fn set_mode(mode: Mode) {
    MODE.store(matches!(mode, Mode::Parallel) as u8, Ordering::Relaxed);
}

pub fn mode() -> Mode {
    if cfg!(feature = "parallel") && MODE.load(Ordering::Relaxed) == 1 {
        Mode::Parallel
    } else {
        Mode::Sequential
    }
}

/// `(0..n).map(f)` collected in order.
pub fn map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode() == Mode::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Fallible [`map`]; the error reported is the one with the lowest index.
pub fn try_map<T, E, F>(n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map(n, f).into_iter().collect()
}

/// Sum in index order; the parallel part is only the evaluation.
pub fn sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    map(n, f).into_iter().fold(0.0, |acc, x| acc + x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_and_sum_independent_of_mode() {
        let f = |i: usize| ((i as f64) * 0.1).sin() / (1.0 + i as f64);
        set_mode(Mode::Sequential);
        let a = map(10_000, f);
        let sa = sum(10_000, f);
        set_mode(Mode::Parallel);
        let b = map(10_000, f);
        let sb = sum(10_000, f);
        assert_eq!(a, b);
        assert_eq!(sa.to_bits(), sb.to_bits());
    }

    #[test]
    fn first_error_wins() {
        let r: Result<Vec<usize>, usize> = try_map(100, |i| if i % 7 == 3 { Err(i) } else { Ok(i) });
        assert_eq!(r, Err(3));
    }
}
