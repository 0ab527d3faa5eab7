//! Bookkeeping for dense matrix allocations made by the solvers.
//!
//! Every dense square buffer created by this crate's linear algebra goes
//! through [`record`]. The largest request on the current thread is kept so
//! callers (the `bench` command, tests) can assert that large systems never
//! fall back to a dense `(nd)²` representation. In debug builds an active
//! [`DenseLimit`] turns an oversize request into a panic.

use std::cell::Cell;

thread_local! {
    static PEAK: Cell<usize> = const { Cell::new(0) };
    static LIMIT: Cell<usize> = const { Cell::new(usize::MAX) };
}

pub fn record(rows: usize, cols: usize) {
    let elems = rows.saturating_mul(cols);
    PEAK.with(|p| p.set(p.get().max(elems)));
    if cfg!(debug_assertions) {
        let limit = LIMIT.with(Cell::get);
        assert!(
            elems <= limit,
            "dense allocation of {rows}x{cols} exceeds the active limit of {limit} elements"
        );
    }
}

/// Largest dense allocation (in elements) recorded on this thread since the
/// last [`reset_peak`].
pub fn peak() -> usize {
    PEAK.with(Cell::get)
}

pub fn reset_peak() {
    PEAK.with(|p| p.set(0));
}

/// Scoped cap on dense allocations; restores the previous cap on drop.
#[must_use]
pub struct DenseLimit {
    previous: usize,
}

impl DenseLimit {
    pub fn new(max_elems: usize) -> Self {
        let previous = LIMIT.with(|l| l.replace(max_elems));
        DenseLimit { previous }
    }
}

impl Drop for DenseLimit {
    fn drop(&mut self) {
        LIMIT.with(|l| l.set(self.previous));
    }
}
