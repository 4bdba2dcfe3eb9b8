//! Process-wide worker count for the embarrassingly parallel loops (fusion
//! trajectories, per-clip denoising). Every work item owns its random stream,
//! so results do not depend on the thread count.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::Result;

static THREADS: AtomicUsize = AtomicUsize::new(1);

/// Sets the worker count; 0 is treated as 1.
pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}

/// `(0..n).map(f)` collected in order, spread over [`threads`] workers.
pub fn map_indexed<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let workers = threads().min(n);
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(workers);
    let f = &f;
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let lo = w * chunk;
                let hi = ((w + 1) * chunk).min(n);
                scope.spawn(move || (lo..hi).map(f).collect::<Result<Vec<T>>>())
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(n);
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved_for_any_worker_count() {
        let serial: Vec<usize> = (0..37).map(|i| i * i).collect();
        for w in [1, 2, 3, 8, 64] {
            set_threads(w);
            assert_eq!(map_indexed(37, |i| Ok(i * i)).unwrap(), serial);
        }
        set_threads(1);
    }
}
