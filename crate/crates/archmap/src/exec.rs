//! Execution strategy for the data-parallel stages.
//!
//! With the default `parallel` feature the helpers dispatch to rayon;
//! without it they compile to plain sequential loops. All call sites are
//! order-preserving maps or disjoint-slice writes, so both paths produce
//! bit-identical results.

use std::cell::Cell;

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

struct SeqGuard(bool);

impl Drop for SeqGuard {
    fn drop(&mut self) {
        FORCE_SEQUENTIAL.with(|f| f.set(self.0));
    }
}

/// Runs `f` with parallel dispatch disabled on the current thread even when
/// the `parallel` feature is compiled in. Benchmarks use this to compare
/// both execution paths within a single build.
pub fn with_sequential<R>(f: impl FnOnce() -> R) -> R {
    let _guard = FORCE_SEQUENTIAL.with(|flag| SeqGuard(flag.replace(true)));
    f()
}

#[cfg(feature = "parallel")]
fn sequential_forced() -> bool {
    FORCE_SEQUENTIAL.with(|f| f.get())
}

/// Order-preserving map over a slice.
#[cfg(feature = "parallel")]
pub fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    if sequential_forced() {
        items.iter().map(f).collect()
    } else {
        items.par_iter().map(f).collect()
    }
}

/// Order-preserving map over a slice.
#[cfg(not(feature = "parallel"))]
pub fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Splits two buffers into chunk pairs and applies `f(chunk_index, a, b)`
/// to each pair. Chunks are disjoint, so parallel execution is race-free.
#[cfg(feature = "parallel")]
pub fn for_each_chunk_pair<A, B, F>(a: &mut [A], chunk_a: usize, b: &mut [B], chunk_b: usize, f: F)
where
    A: Send,
    B: Send,
    F: Fn(usize, &mut [A], &mut [B]) + Sync + Send,
{
    use rayon::prelude::*;
    if sequential_forced() {
        for (i, (ca, cb)) in a.chunks_mut(chunk_a).zip(b.chunks_mut(chunk_b)).enumerate() {
            f(i, ca, cb);
        }
    } else {
        a.par_chunks_mut(chunk_a)
            .zip(b.par_chunks_mut(chunk_b))
            .enumerate()
            .for_each(|(i, (ca, cb))| f(i, ca, cb));
    }
}

/// Splits two buffers into chunk pairs and applies `f(chunk_index, a, b)`
/// to each pair.
#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk_pair<A, B, F>(a: &mut [A], chunk_a: usize, b: &mut [B], chunk_b: usize, f: F)
where
    F: Fn(usize, &mut [A], &mut [B]),
{
    for (i, (ca, cb)) in a.chunks_mut(chunk_a).zip(b.chunks_mut(chunk_b)).enumerate() {
        f(i, ca, cb);
    }
}

/// Splits one buffer into chunks and applies `f(chunk_index, chunk)`.
#[cfg(feature = "parallel")]
pub fn for_each_chunk<A, F>(a: &mut [A], chunk: usize, f: F)
where
    A: Send,
    F: Fn(usize, &mut [A]) + Sync + Send,
{
    use rayon::prelude::*;
    if sequential_forced() {
        for (i, ca) in a.chunks_mut(chunk).enumerate() {
            f(i, ca);
        }
    } else {
        a.par_chunks_mut(chunk).enumerate().for_each(|(i, ca)| f(i, ca));
    }
}

/// Splits one buffer into chunks and applies `f(chunk_index, chunk)`.
#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk<A, F>(a: &mut [A], chunk: usize, f: F)
where
    F: Fn(usize, &mut [A]),
{
    for (i, ca) in a.chunks_mut(chunk).enumerate() {
        f(i, ca);
    }
}

/// Maps `f` over owned items on a bounded worker pool, preserving order.
/// `max_workers <= 1` runs inline.
#[cfg(feature = "parallel")]
pub fn map_bounded<T, U, F>(items: Vec<T>, max_workers: usize, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    if sequential_forced() || max_workers <= 1 {
        return items.into_iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(max_workers).build() {
        Ok(pool) => pool.install(|| items.into_par_iter().map(f).collect()),
        Err(_) => items.into_iter().map(f).collect(),
    }
}

/// Maps `f` over owned items, preserving order.
#[cfg(not(feature = "parallel"))]
pub fn map_bounded<T, U, F>(items: Vec<T>, _max_workers: usize, f: F) -> Vec<U>
where
    F: Fn(T) -> U,
{
    items.into_iter().map(f).collect()
}
