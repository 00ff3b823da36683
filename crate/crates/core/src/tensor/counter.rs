//! Thread-local multiply-accumulate counters.
//!
//! Every kernel that performs multiply-accumulates reports them here, under
//! whichever [`MacKind`] is active on the current thread. Used by the
//! complexity probe; the overhead is one thread-local add per kernel call.

use std::cell::Cell;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MacKind {
    /// Projections, convolutions, scans: everything per-token.
    Dense,
    /// Attention score products between neurons (`Q Kᵀ`).
    Scores,
    /// Attention-weighted mixing of neuron values (`weights · V`).
    Mix,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacCounts {
    pub dense: u64,
    pub scores: u64,
    pub mix: u64,
}

impl MacCounts {
    pub fn total(&self) -> u64 {
        self.dense + self.scores + self.mix
    }
}

thread_local! {
    static COUNTS: Cell<MacCounts> = const { Cell::new(MacCounts { dense: 0, scores: 0, mix: 0 }) };
    static KIND: Cell<MacKind> = const { Cell::new(MacKind::Dense) };
}

pub(crate) fn add_macs(n: u64) {
    let kind = KIND.with(|k| k.get());
    COUNTS.with(|c| {
        let mut v = c.get();
        match kind {
            MacKind::Dense => v.dense += n,
            MacKind::Scores => v.scores += n,
            MacKind::Mix => v.mix += n,
        }
        c.set(v);
    });
}

/// Runs `f` with MACs attributed to `kind`.
pub fn with_kind<R>(kind: MacKind, f: impl FnOnce() -> R) -> R {
    let prev = KIND.with(|k| k.replace(kind));
    let out = f();
    KIND.with(|k| k.set(prev));
    out
}

pub fn reset() {
    COUNTS.with(|c| c.set(MacCounts::default()));
}

pub fn snapshot() -> MacCounts {
    COUNTS.with(|c| c.get())
}
