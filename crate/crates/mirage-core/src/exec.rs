//! Ordered map helpers with an optional data-parallel implementation.
//!
//! With the `parallel` feature (on by default) the work is spread over
//! rayon's pool; results always come back in input order, so callers see
//! identical output either way. The `_seq` variants are always compiled
//! and back the sequential fallback, the parity tests, and the benches.

#[cfg(feature = "parallel")]
pub(crate) fn map_ordered<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_ordered<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    map_ordered_seq(items, f)
}

pub(crate) fn map_ordered_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}
