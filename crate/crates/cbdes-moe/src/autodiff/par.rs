//! Deterministic fork-join over contiguous output rows.
//!
//! Every row is produced by exactly one thread with a fixed sequential inner
//! loop, so results are bit-identical for any thread count.

/// Minimum output elements before a kernel bothers spawning threads.
const PAR_THRESHOLD: usize = 8192;

/// Splits `out` into rows of `row_len` elements and hands contiguous row
/// ranges to up to `threads` worker threads. `f(row_index, row)` must write
/// only through the row it is given.
pub fn par_rows<F>(threads: usize, out: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    assert!(row_len > 0 && out.len() % row_len == 0);
    let items = out.len() / row_len;
    let t = if out.len() < PAR_THRESHOLD {
        1
    } else {
        threads.min(items).max(1)
    };
    if t <= 1 {
        for (i, row) in out.chunks_mut(row_len).enumerate() {
            f(i, row);
        }
        return;
    }
    let per = items.div_ceil(t);
    std::thread::scope(|scope| {
        let mut rest = out;
        let mut start = 0usize;
        while start < items {
            let take = per.min(items - start);
            let (head, tail) = rest.split_at_mut(take * row_len);
            rest = tail;
            let base = start;
            let fref = &f;
            scope.spawn(move || {
                for (k, row) in head.chunks_mut(row_len).enumerate() {
                    fref(base + k, row);
                }
            });
            start += take;
        }
    });
}
