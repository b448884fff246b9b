//! Data-parallel map over independent work items.
//!
//! With the `parallel` feature (default) work runs on rayon; without it every
//! strategy degrades to a sequential loop. Results always come back in input
//! order, so reductions over them are deterministic either way.

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Parallel on at most `threads` workers; `None` uses all cores.
    Parallel { threads: Option<usize> },
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel { threads: None }
        } else {
            Execution::Sequential
        }
    }
}

impl Execution {
    /// Worker cap from an environment variable such as `SSM_PTQ_THREADS`.
    /// `1` means sequential; unset, empty or unparsable means the default.
    pub fn from_env(var: &str) -> Self {
        match std::env::var(var).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
            Some(0) | None => Self::default(),
            Some(1) => Execution::Sequential,
            Some(n) => Execution::Parallel { threads: Some(n) },
        }
    }

    pub fn is_parallel(&self) -> bool {
        cfg!(feature = "parallel") && matches!(self, Execution::Parallel { .. })
    }

    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            Execution::Sequential => items.iter().map(f).collect(),
            Execution::Parallel { threads } => par_map(items, *threads, f),
        }
    }

    /// Like [`Self::map`], returning the error of the earliest failing item.
    pub fn try_map<T, R, F>(&self, items: &[T], f: F) -> Result<Vec<R>>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> Result<R> + Sync + Send,
    {
        self.map(items, f).into_iter().collect()
    }
}

#[cfg(feature = "parallel")]
fn par_map<T, R, F>(items: &[T], threads: Option<usize>, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    let run = || items.par_iter().map(&f).collect();
    match threads {
        None => run(),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(run),
            Err(_) => items.iter().map(&f).collect(),
        },
    }
}

#[cfg(not(feature = "parallel"))]
fn par_map<T, R, F>(items: &[T], _threads: Option<usize>, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn strategies_agree_and_keep_order() {
        let items: Vec<u64> = (0..200).collect();
        let f = |x: &u64| x * x + 1;
        let seq = Execution::Sequential.map(&items, f);
        assert_eq!(seq, Execution::Parallel { threads: None }.map(&items, f));
        assert_eq!(seq, Execution::Parallel { threads: Some(3) }.map(&items, f));
        assert_eq!(seq[7], 50);
    }

    #[test]
    fn try_map_reports_first_error() {
        let items = [1, 2, 3, 4];
        let r = Execution::default().try_map(&items, |&x| {
            if x >= 2 {
                Err(Error::invalid(format!("item {x}")))
            } else {
                Ok(x)
            }
        });
        assert_eq!(r.unwrap_err().to_string(), "item 2");
    }
}
