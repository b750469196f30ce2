//! Small shared helpers.

/// Map `f` over `0..n` on up to `workers` threads, collecting results in
/// index order. Each item must derive its own randomness, so the outcome is
/// identical for any worker count.
pub fn parallel_map<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = workers.max(1).min(n.max(1));
    if workers == 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let mut out: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(workers);
    std::thread::scope(|scope| {
        for (w, slot) in out.chunks_mut(chunk).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (j, cell) in slot.iter_mut().enumerate() {
                    *cell = Some(f(w * chunk + j));
                }
            });
        }
    });
    out.into_iter().map(|x| x.unwrap()).collect()
}

/// Worker count for data-preparation pools: the `S4M_THREADS` env var when
/// set, otherwise 1.
pub fn default_workers() -> usize {
    std::env::var("S4M_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_order_and_worker_independence() {
        let a = parallel_map(17, 1, |i| i * i);
        let b = parallel_map(17, 4, |i| i * i);
        let c = parallel_map(17, 9, |i| i * i);
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(a[16], 256);
    }

    #[test]
    fn parallel_map_empty() {
        let v: Vec<usize> = parallel_map(0, 4, |i| i);
        assert!(v.is_empty());
    }
}
