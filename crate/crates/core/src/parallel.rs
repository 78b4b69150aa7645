//! Order-preserving data parallelism over scoped threads.

/// Threads to use when the caller asks for `0` (all available cores).
pub fn resolve_threads(requested: usize) -> usize {
    if requested > 0 {
        requested
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    }
}

/// `items.iter().map(f)` evaluated on up to `threads` threads. Results come
/// back in input order, so anything folded from them afterwards does not
/// depend on the thread count.
pub fn par_map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(k, part)| {
                let f = &f;
                scope.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(i, t)| f(k * chunk + i, t))
                        .collect::<Vec<R>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_independent_of_thread_count() {
        let items: Vec<u64> = (0..37).collect();
        let one = par_map(&items, 1, |i, &x| (i as u64) * 1000 + x * x);
        for t in [2, 3, 8, 64] {
            assert_eq!(par_map(&items, t, |i, &x| (i as u64) * 1000 + x * x), one);
        }
        assert!(par_map(&Vec::<u8>::new(), 4, |_, &x| x).is_empty());
        assert!(resolve_threads(0) >= 1);
    }
}
