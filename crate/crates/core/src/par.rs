//! Data-parallel map with a sequential fallback.

use crate::fft::Exec;

/// Maps `f` over `items`, in order, on the rayon pool when `exec` is
/// [`Exec::Parallel`] and the `parallel` feature is enabled.
pub fn map_with<T, R, F>(exec: Exec, items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            items.into_par_iter().map(f).collect()
        }
        _ => items.into_iter().map(f).collect(),
    }
}
