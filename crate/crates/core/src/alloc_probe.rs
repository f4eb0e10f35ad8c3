//! Per-thread heap accounting.
//!
//! [`CountingAlloc`] forwards to the system allocator and tracks, for the
//! calling thread, the bytes currently allocated and their high-water mark.
//! It only takes effect in a binary that installs it:
//!
//! ```ignore
//! #[global_allocator]
//! static ALLOC: dkl_core::alloc_probe::CountingAlloc = dkl_core::alloc_probe::CountingAlloc;
//! ```

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::sync::atomic::{AtomicBool, Ordering};

pub struct CountingAlloc;

static INSTALLED: AtomicBool = AtomicBool::new(false);

thread_local! {
    static CURRENT: Cell<isize> = const { Cell::new(0) };
    static PEAK: Cell<isize> = const { Cell::new(0) };
    static COUNT: Cell<u64> = const { Cell::new(0) };
}

fn record(delta: isize, new_block: bool) {
    let _ = CURRENT.try_with(|cur| {
        let now = cur.get() + delta;
        cur.set(now);
        let _ = PEAK.try_with(|p| {
            if now > p.get() {
                p.set(now);
            }
        });
    });
    if new_block {
        let _ = COUNT.try_with(|c| c.set(c.get() + 1));
    }
}

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let ptr = System.alloc(layout);
        if !ptr.is_null() {
            INSTALLED.store(true, Ordering::Relaxed);
            record(layout.size() as isize, true);
        }
        ptr
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let ptr = System.alloc_zeroed(layout);
        if !ptr.is_null() {
            INSTALLED.store(true, Ordering::Relaxed);
            record(layout.size() as isize, true);
        }
        ptr
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        record(-(layout.size() as isize), false);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let out = System.realloc(ptr, layout, new_size);
        if !out.is_null() {
            record(new_size as isize - layout.size() as isize, true);
        }
        out
    }
}

/// Whether a [`CountingAlloc`] is the global allocator of this process.
pub fn is_installed() -> bool {
    if !INSTALLED.load(Ordering::Relaxed) {
        drop(std::hint::black_box(Box::new(0u64)));
    }
    INSTALLED.load(Ordering::Relaxed)
}

/// Heap activity of the calling thread during one [`measure`] call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocStats {
    /// Highest number of bytes live at once, above the level at entry.
    pub peak_bytes: usize,
    /// Bytes still live at exit, above the level at entry.
    pub retained_bytes: usize,
    pub allocations: u64,
}

impl AllocStats {
    /// Bytes that were live at the peak but released before exit.
    pub fn transient_bytes(&self) -> usize {
        self.peak_bytes.saturating_sub(self.retained_bytes)
    }
}

/// Runs `f` and reports the heap activity of the calling thread. All zeros
/// when no [`CountingAlloc`] is installed.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, AllocStats) {
    let start = CURRENT.with(Cell::get);
    let saved_peak = PEAK.with(|p| p.replace(start));
    let count = COUNT.with(Cell::get);
    let out = f();
    let end = CURRENT.with(Cell::get);
    let peak = PEAK.with(|p| p.replace(saved_peak.max(p.get())));
    let allocations = COUNT.with(Cell::get) - count;
    (
        out,
        AllocStats {
            peak_bytes: (peak - start).max(0) as usize,
            retained_bytes: (end - start).max(0) as usize,
            allocations,
        },
    )
}
