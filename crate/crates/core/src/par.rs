//! Data-parallel helpers.
//!
//! With the `parallel` feature the batch loops below run on the rayon pool;
//! without it they fall back to plain iterators. Every helper preserves input
//! order, so results do not depend on the schedule.

/// Execution strategy for the batch entry points that expose both paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// `Parallel` when the feature is compiled in, otherwise `Sequential`.
    pub fn auto() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

/// Order-preserving map over a slice.
pub fn map<T, R, F>(exec: Exec, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}

/// Order-preserving map over `0..n`.
pub fn map_range<R, F>(exec: Exec, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Fallible order-preserving map; the first error in index order wins.
pub fn try_map<T, R, E, F>(exec: Exec, items: &[T], f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync + Send,
{
    map(exec, items, f).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_paths_agree_and_keep_order() {
        let xs: Vec<u64> = (0..1000).collect();
        let a = map(Exec::Sequential, &xs, |x| x * x);
        let b = map(Exec::Parallel, &xs, |x| x * x);
        assert_eq!(a, b);
        assert_eq!(map_range(Exec::Parallel, 5, |i| i), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn try_map_reports_first_error() {
        let xs = [1, 2, 3, 4];
        let r: Result<Vec<i32>, i32> = try_map(Exec::Parallel, &xs, |&x| if x >= 2 { Err(x) } else { Ok(x) });
        assert_eq!(r, Err(2));
    }
}
