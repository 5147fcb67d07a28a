//! Capped worker-pool map over a slice, preserving input order.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// Applies `f` to every item using at most `cap` worker threads and returns
/// results in input order. Worker panics propagate to the caller.
pub fn map_capped<T, U, F>(items: &[T], cap: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Send + Sync,
{
    assert!(cap >= 1, "worker cap must be at least 1");
    if items.is_empty() {
        return Vec::new();
    }
    let workers = cap.min(items.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<BTreeMap<usize, U>> = Mutex::new(BTreeMap::new());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, Ordering::SeqCst);
                if index >= items.len() {
                    break;
                }
                let value = f(index, &items[index]);
                results.lock().expect("result map poisoned").insert(index, value);
            });
        }
    });
    let map = results.into_inner().expect("result map poisoned");
    assert_eq!(map.len(), items.len());
    map.into_values().collect()
}
