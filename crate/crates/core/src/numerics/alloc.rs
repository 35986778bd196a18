//! Allocation accounting for tensor storage.
//!
//! Every tensor buffer reports its size here on creation and on drop. The
//! counter is thread-local: a measurement scope only observes the thread it
//! was opened on.

use std::cell::RefCell;

/// Live and peak byte counts observed inside one measurement scope.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AllocCounter {
    /// Bytes allocated inside the scope and still live when it closed.
    pub current_bytes: usize,
    /// Maximum of live scope-local bytes at any point.
    pub peak_bytes: usize,
}

/// One entry of an allocation trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AllocEvent {
    Alloc { bytes: usize, live: i64 },
    Free { bytes: usize, live: i64 },
    /// A named position in the trace, with the scope-local live bytes at
    /// that point.
    Mark { label: String, live: i64 },
}

impl AllocEvent {
    pub fn live(&self) -> i64 {
        match self {
            AllocEvent::Alloc { live, .. }
            | AllocEvent::Free { live, .. }
            | AllocEvent::Mark { live, .. } => *live,
        }
    }
}

struct Scope {
    base: i64,
    peak: i64,
    trace: Option<Vec<AllocEvent>>,
}

#[derive(Default)]
struct Ledger {
    live: i64,
    scopes: Vec<Scope>,
}

thread_local! {
    static LEDGER: RefCell<Ledger> = RefCell::new(Ledger::default());
}

pub(crate) fn on_alloc(bytes: usize) {
    if bytes == 0 {
        return;
    }
    LEDGER.with(|l| {
        let mut l = l.borrow_mut();
        l.live += bytes as i64;
        let live = l.live;
        for s in l.scopes.iter_mut() {
            let rel = live - s.base;
            s.peak = s.peak.max(rel);
            if let Some(t) = s.trace.as_mut() {
                t.push(AllocEvent::Alloc { bytes, live: rel });
            }
        }
    });
}

pub(crate) fn on_free(bytes: usize) {
    if bytes == 0 {
        return;
    }
    // try_with: buffers may be dropped during thread-local teardown.
    let _ = LEDGER.try_with(|l| {
        let mut l = l.borrow_mut();
        l.live -= bytes as i64;
        let live = l.live;
        for s in l.scopes.iter_mut() {
            if let Some(t) = s.trace.as_mut() {
                t.push(AllocEvent::Free {
                    bytes,
                    live: live - s.base,
                });
            }
        }
    });
}

/// Records a labelled marker in every tracing scope on this thread.
pub fn mark(label: &str) {
    LEDGER.with(|l| {
        let mut l = l.borrow_mut();
        let live = l.live;
        for s in l.scopes.iter_mut() {
            if let Some(t) = s.trace.as_mut() {
                t.push(AllocEvent::Mark {
                    label: label.to_string(),
                    live: live - s.base,
                });
            }
        }
    });
}

/// Bytes of tensor storage currently live on this thread.
pub fn live_bytes() -> i64 {
    LEDGER.with(|l| l.borrow().live)
}

fn run_scope<R>(trace: bool, f: impl FnOnce() -> R) -> (R, AllocCounter, Vec<AllocEvent>) {
    LEDGER.with(|l| {
        let mut l = l.borrow_mut();
        let base = l.live;
        l.scopes.push(Scope {
            base,
            peak: 0,
            trace: trace.then(Vec::new),
        });
    });
    let out = f();
    let (scope, live) = LEDGER.with(|l| {
        let mut l = l.borrow_mut();
        let scope = l.scopes.pop().expect("allocation scope stack underflow");
        (scope, l.live)
    });
    let counter = AllocCounter {
        current_bytes: (live - scope.base).max(0) as usize,
        peak_bytes: scope.peak.max(0) as usize,
    };
    (out, counter, scope.trace.unwrap_or_default())
}

/// Runs `f` and reports the peak of tensor bytes allocated inside it.
///
/// Buffers that were already live when the scope opened form the baseline
/// and do not count toward the peak.
pub fn scoped_peak<R>(f: impl FnOnce() -> R) -> (R, AllocCounter) {
    let (out, counter, _) = run_scope(false, f);
    (out, counter)
}

/// Like [`scoped_peak`], also returning the full event trace.
pub fn scoped_trace<R>(f: impl FnOnce() -> R) -> (R, AllocCounter, Vec<AllocEvent>) {
    run_scope(true, f)
}

/// Peak of scope-local live bytes replayed from a trace.
pub fn peak_from_trace(events: &[AllocEvent]) -> usize {
    events.iter().map(|e| e.live()).max().unwrap_or(0).max(0) as usize
}
