//! Order-preserving fan-out over read-only work.

use std::num::NonZeroUsize;

pub const THREADS_ENV: &str = "DECODE_LAB_THREADS";

/// Worker count: the machine's parallelism, capped by `DECODE_LAB_THREADS`
/// when it is set to a positive integer.
pub fn threads() -> usize {
    let available = std::thread::available_parallelism().map_or(1, NonZeroUsize::get);
    match std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(cap) if cap >= 1 => available.min(cap),
        _ => available,
    }
}

/// Splits `items` into contiguous chunks, runs `f` on each (on scoped
/// threads when more than one worker is allowed) and concatenates the
/// results in input order.
pub fn map_chunks<T, R, E, F>(items: &[T], f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&[T]) -> Result<Vec<R>, E> + Sync,
{
    let n = threads().min(items.len()).max(1);
    if n == 1 {
        return f(items);
    }
    let chunk = items.len().div_ceil(n);
    let parts: Vec<Result<Vec<R>, E>> = std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| f(c))).collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
