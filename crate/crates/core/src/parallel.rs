//! Index-ordered parallel map over scoped threads.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::Result;

pub const WORKERS_ENV: &str = "PROTOGLYPH_WORKERS";

/// `0` means one worker per available core.
pub fn resolve_workers(requested: usize) -> usize {
    if requested > 0 {
        return requested;
    }
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Evaluates `f(0..n)` on up to `workers` threads and returns results in
/// index order. The first error by index wins.
pub fn ordered_map<T, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let workers = resolve_workers(workers).min(n.max(1));
    if workers <= 1 {
        return (0..n).map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    let chunks: Vec<Vec<(usize, Result<T>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut out = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= n {
                            break;
                        }
                        out.push((i, f(i)));
                    }
                    out
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
            .collect()
    });
    for (i, r) in chunks.into_iter().flatten() {
        slots[i] = Some(r);
    }
    slots.into_iter().map(|r| r.expect("every index visited")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn keeps_index_order() {
        let v = ordered_map(50, 4, |i| Ok(i * i)).unwrap();
        assert_eq!(v, (0..50).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn reports_lowest_failing_index() {
        let r: Result<Vec<usize>> = ordered_map(20, 3, |i| {
            if i % 7 == 6 {
                Err(Error::Contract(format!("bad {i}")))
            } else {
                Ok(i)
            }
        });
        assert!(matches!(r, Err(Error::Contract(m)) if m == "bad 6"));
    }
}
