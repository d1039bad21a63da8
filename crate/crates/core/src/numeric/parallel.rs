//! Scoped-thread fan-out with a cap taken from `REFINE_NUM_THREADS`.

use std::thread;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "REFINE_NUM_THREADS";

/// Worker count: the env cap if set and positive, else the machine's parallelism.
pub fn max_threads() -> usize {
    let hw = thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(n) if n > 0 => n,
        _ => hw,
    }
}

/// Maps `f` over `items`, preserving order. Results do not depend on the
/// thread count because each item is processed independently.
pub fn par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync,
{
    let workers = max_threads().min(items.len());
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(f).collect::<Vec<U>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}
