//! Process-wide allocator tuning for training workloads.

/// Keeps freed heap pages mapped so the many short-lived feature maps of a
/// training step reuse warm memory instead of faulting in fresh pages.
/// A no-op outside glibc.
pub fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator thresholds; it is safe to call
    // at any time and these values are within glibc's accepted ranges.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TOP_PAD, 64 << 20);
    }
}
