//! Peak transient-allocation accounting. A binary opts in by installing
//! [`CountingAllocator`] as its global allocator; [`measure_peak`] then
//! brackets a closure and reports the high-water mark of live bytes
//! allocated inside it.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static ENABLED: AtomicBool = AtomicBool::new(false);

/// Drop-in [`System`] wrapper that tracks live bytes while enabled.
pub struct CountingAllocator;

fn on_alloc(size: usize) {
    if ENABLED.load(Ordering::Relaxed) {
        let cur = CURRENT.fetch_add(size, Ordering::Relaxed) + size;
        PEAK.fetch_max(cur, Ordering::Relaxed);
    }
}

fn on_dealloc(size: usize) {
    if ENABLED.load(Ordering::Relaxed) {
        // Buffers allocated before enabling may be freed inside the
        // measured region; saturate instead of wrapping below zero.
        let _ = CURRENT.fetch_update(Ordering::Relaxed, Ordering::Relaxed, |cur| {
            Some(cur.saturating_sub(size))
        });
    }
}

unsafe impl GlobalAlloc for CountingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            on_alloc(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        on_dealloc(layout.size());
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc_zeroed(layout) };
        if !p.is_null() {
            on_alloc(layout.size());
        }
        p
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            on_dealloc(layout.size());
            on_alloc(new_size);
        }
        p
    }
}

/// Runs `f` with counting enabled and returns its result plus the peak of
/// live bytes allocated during the call. Returns 0 bytes when the counting
/// allocator is not installed in this binary. Not reentrant; the caller
/// serializes measurements.
pub fn measure_peak<R>(f: impl FnOnce() -> R) -> (R, usize) {
    CURRENT.store(0, Ordering::Relaxed);
    PEAK.store(0, Ordering::Relaxed);
    ENABLED.store(true, Ordering::Relaxed);
    let result = f();
    ENABLED.store(false, Ordering::Relaxed);
    (result, PEAK.load(Ordering::Relaxed))
}

#[cfg(test)]
mod tests {
    use super::*;

    // The lib test binary installs the allocator (see lib.rs), so peaks
    // here are real.
    #[test]
    fn peak_sees_a_large_transient_buffer() {
        let (len, peak) = measure_peak(|| {
            let v = vec![0u8; 1 << 20];
            v.len()
        });
        assert_eq!(len, 1 << 20);
        assert!(peak >= 1 << 20, "peak {peak} missed the 1 MiB buffer");
    }

    #[test]
    fn disabled_region_does_not_count() {
        let ((), peak) = measure_peak(|| ());
        let v = vec![0u8; 1 << 16];
        assert!(peak < 1 << 16);
        drop(v);
    }

    #[test]
    fn foreign_frees_saturate_instead_of_wrapping() {
        let outside = vec![1u8; 4096];
        let ((), peak) = measure_peak(move || {
            drop(outside);
            let _inside = vec![2u8; 2048];
        });
        assert!(peak >= 2048);
        assert!(peak < 1 << 30, "peak {peak} looks wrapped");
    }
}
