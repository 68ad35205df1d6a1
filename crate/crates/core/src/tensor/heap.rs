//! Optional raw-heap accounting.
//!
//! Tensor bytes are the primary memory metric; this allocator wrapper adds a
//! secondary view of *all* heap traffic on a thread. A binary or test target
//! opts in with
//!
//! ```ignore
//! #[global_allocator]
//! static HEAP: mebp::tensor::heap::CountingAllocator = mebp::tensor::heap::CountingAllocator;
//! ```
//!
//! Without that, [`heap_scope`] reports zeros and [`is_installed`] is false.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::sync::atomic::{AtomicBool, Ordering};

static INSTALLED: AtomicBool = AtomicBool::new(false);

thread_local! {
    static LIVE: Cell<i64> = const { Cell::new(0) };
    static PEAK: Cell<i64> = const { Cell::new(0) };
}

pub struct CountingAllocator;

fn record(delta: i64) {
    let _ = LIVE.try_with(|live| {
        let now = live.get() + delta;
        live.set(now);
        let _ = PEAK.try_with(|p| {
            if now > p.get() {
                p.set(now)
            }
        });
    });
}

unsafe impl GlobalAlloc for CountingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        INSTALLED.store(true, Ordering::Relaxed);
        let ptr = unsafe { System.alloc(layout) };
        if !ptr.is_null() {
            record(layout.size() as i64);
        }
        ptr
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        INSTALLED.store(true, Ordering::Relaxed);
        let ptr = unsafe { System.alloc_zeroed(layout) };
        if !ptr.is_null() {
            record(layout.size() as i64);
        }
        ptr
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        record(-(layout.size() as i64));
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let out = unsafe { System.realloc(ptr, layout, new_size) };
        if !out.is_null() {
            record(new_size as i64 - layout.size() as i64);
        }
        out
    }
}

/// True once [`CountingAllocator`] has served an allocation in this process.
pub fn is_installed() -> bool {
    INSTALLED.load(Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct HeapReport {
    /// Highest heap level above the entry level.
    pub peak_delta: u64,
    /// Heap level on exit minus level on entry.
    pub net_delta: i64,
}

/// Measure raw heap growth on the current thread while `f` runs.
pub fn heap_scope<R>(f: impl FnOnce() -> R) -> (R, HeapReport) {
    let base = LIVE.with(Cell::get);
    let saved_peak = PEAK.with(|p| p.replace(base));
    let out = f();
    let end = LIVE.with(Cell::get);
    let peak = PEAK.with(|p| p.replace(saved_peak.max(p.get())));
    (
        out,
        HeapReport {
            peak_delta: (peak - base).max(0) as u64,
            net_delta: end - base,
        },
    )
}
