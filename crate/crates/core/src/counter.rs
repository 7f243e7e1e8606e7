//! Per-thread instrumentation counters.
//!
//! Kernels add their nominal work here as they run. The complexity analyzer
//! computes the same quantities in closed form, and tests require both to
//! agree exactly.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

/// Work recorded since the last [`reset`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub macs: u64,
    pub exps: u64,
    pub divs: u64,
    /// Sampled `(pixel, point)` locations, independent of channel count.
    pub sample_points: u64,
    /// Entries into deformable-attention-pyramid operations.
    pub dap_calls: u64,
}

thread_local! {
    static COUNTS: Cell<OpCounts> = const { Cell::new(OpCounts {
        macs: 0,
        exps: 0,
        divs: 0,
        sample_points: 0,
        dap_calls: 0,
    }) };
}

fn update(f: impl FnOnce(&mut OpCounts)) {
    COUNTS.with(|c| {
        let mut v = c.get();
        f(&mut v);
        c.set(v);
    });
}

pub fn reset() {
    COUNTS.with(|c| c.set(OpCounts::default()));
}

pub fn snapshot() -> OpCounts {
    COUNTS.with(Cell::get)
}

pub(crate) fn add_macs(n: u64) {
    update(|c| c.macs += n);
}

pub(crate) fn add_exps(n: u64) {
    update(|c| c.exps += n);
}

pub(crate) fn add_divs(n: u64) {
    update(|c| c.divs += n);
}

pub(crate) fn add_sample_points(n: u64) {
    update(|c| c.sample_points += n);
}

pub(crate) fn add_dap_call() {
    update(|c| c.dap_calls += 1);
}
