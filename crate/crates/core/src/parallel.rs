//! Order-preserving fan-out over scenes.

use crate::error::Result;

/// Maps `f` over `items` on up to `threads` scoped threads. Results come back
/// in input order, so reductions over them do not depend on the thread count.
pub fn map_ordered<R: Send>(
    threads: usize,
    items: &[usize],
    f: impl Fn(usize) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(|&i| f(i)).collect();
    }
    let nt = threads.min(items.len());
    let f = &f;
    let mut slots: Vec<Option<Result<R>>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|sc| {
        let handles: Vec<_> = (0..nt)
            .map(|t| {
                sc.spawn(move || {
                    (t..items.len())
                        .step_by(nt)
                        .map(|k| (k, f(items[k])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (k, r) in h.join().expect("worker thread panicked") {
                slots[k] = Some(r);
            }
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every slot filled"))
        .collect()
}
