//! Accounting of live tensor-buffer bytes.
//!
//! Every [`Tensor`](super::Tensor) buffer registers its size on creation and
//! releases it on drop. Scopes attribute a high-water mark to a labelled region
//! of code. Attribution is per thread, so concurrently running steps (or test
//! threads) never pollute each other's measurements; a process-wide pair of
//! atomics records the aggregate for informational reporting.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// What a tracked buffer holds. Frozen weights are counted separately so the
/// runtime can assert that at most one block's decompressed weights are resident.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Category {
    #[default]
    General,
    FrozenWeight,
}

const N_CAT: usize = 2;

impl Category {
    fn slot(self) -> usize {
        match self {
            Category::General => 0,
            Category::FrozenWeight => 1,
        }
    }
}

static GLOBAL_LIVE: AtomicU64 = AtomicU64::new(0);
static GLOBAL_HIGH: AtomicU64 = AtomicU64::new(0);

#[derive(Debug)]
struct Scope {
    label: String,
    base: u64,
    peak: u64,
    peak_cat: [u64; N_CAT],
}

#[derive(Debug, Default)]
struct ThreadState {
    live: [u64; N_CAT],
    scopes: Vec<Scope>,
}

impl ThreadState {
    fn total(&self) -> u64 {
        self.live.iter().sum()
    }
}

thread_local! {
    static STATE: RefCell<ThreadState> = RefCell::new(ThreadState::default());
}

pub(crate) fn on_alloc(bytes: u64, cat: Category) {
    let g = GLOBAL_LIVE.fetch_add(bytes, Ordering::Relaxed) + bytes;
    GLOBAL_HIGH.fetch_max(g, Ordering::Relaxed);
    let _ = STATE.try_with(|s| {
        let mut s = s.borrow_mut();
        s.live[cat.slot()] += bytes;
        let total = s.total();
        let cat_live = s.live[cat.slot()];
        if let Some(top) = s.scopes.last_mut() {
            top.peak = top.peak.max(total);
            top.peak_cat[cat.slot()] = top.peak_cat[cat.slot()].max(cat_live);
        }
    });
}

pub(crate) fn on_free(bytes: u64, cat: Category) {
    GLOBAL_LIVE.fetch_sub(bytes, Ordering::Relaxed);
    let _ = STATE.try_with(|s| {
        let mut s = s.borrow_mut();
        // A buffer dropped on a thread other than its creator can underflow that
        // thread's counter; saturate instead of wrapping.
        s.live[cat.slot()] = s.live[cat.slot()].saturating_sub(bytes);
    });
}

/// Live tracked bytes on the current thread.
pub fn live_bytes() -> u64 {
    STATE.with(|s| s.borrow().total())
}

pub fn live_bytes_in(cat: Category) -> u64 {
    STATE.with(|s| s.borrow().live[cat.slot()])
}

/// Live tracked bytes across all threads.
pub fn global_live_bytes() -> u64 {
    GLOBAL_LIVE.load(Ordering::Relaxed)
}

/// Process-wide high-water since start.
pub fn global_high_water() -> u64 {
    GLOBAL_HIGH.load(Ordering::Relaxed)
}

/// Result of closing a measurement scope.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScopeReport {
    pub label: String,
    /// Live bytes when the scope was entered.
    pub base_bytes: u64,
    /// Absolute live-byte peak observed while the scope was open.
    pub peak_bytes: u64,
    /// Peak bytes attributed to the scope (`peak_bytes - base_bytes`).
    pub high_water: u64,
    /// Absolute peak of frozen-weight bytes while the scope was open.
    pub frozen_weight_peak: u64,
    /// Live bytes on exit minus live bytes on entry.
    pub net_bytes: i64,
}

pub fn enter_scope(label: &str) {
    STATE.with(|s| {
        let mut s = s.borrow_mut();
        let base = s.total();
        let base_cat = s.live;
        s.scopes.push(Scope {
            label: label.to_owned(),
            base,
            peak: base,
            peak_cat: base_cat,
        });
    });
}

/// Close the innermost scope, which must carry `label`.
pub fn exit_scope(label: &str) -> Result<ScopeReport> {
    STATE.with(|s| {
        let mut s = s.borrow_mut();
        let found = match s.scopes.last() {
            Some(top) => top.label.clone(),
            None => "<none>".to_owned(),
        };
        if found != label {
            return Err(Error::ScopeMismatch {
                expected: label.to_owned(),
                found,
            });
        }
        let scope = s.scopes.pop().expect("checked above");
        let now = s.total();
        if let Some(parent) = s.scopes.last_mut() {
            parent.peak = parent.peak.max(scope.peak);
            for (p, c) in parent.peak_cat.iter_mut().zip(scope.peak_cat) {
                *p = (*p).max(c);
            }
        }
        Ok(ScopeReport {
            label: scope.label,
            base_bytes: scope.base,
            peak_bytes: scope.peak,
            high_water: scope.peak - scope.base,
            frozen_weight_peak: scope.peak_cat[Category::FrozenWeight.slot()],
            net_bytes: now as i64 - scope.base as i64,
        })
    })
}

struct ScopeGuard<'a> {
    label: &'a str,
    armed: bool,
}

impl Drop for ScopeGuard<'_> {
    fn drop(&mut self) {
        if self.armed {
            let _ = exit_scope(self.label);
        }
    }
}

/// Run `f` inside a labelled scope and report its memory profile.
pub fn measure<R>(label: &str, f: impl FnOnce() -> R) -> (R, ScopeReport) {
    enter_scope(label);
    let mut guard = ScopeGuard { label, armed: true };
    let out = f();
    guard.armed = false;
    let report = exit_scope(label).expect("scope stack corrupted inside measured closure");
    (out, report)
}

/// Run `f` and return the high-water of tensor bytes attributed to it.
pub fn track_scope<R>(label: &str, f: impl FnOnce() -> R) -> (R, u64) {
    let (out, report) = measure(label, f);
    (out, report.high_water)
}
