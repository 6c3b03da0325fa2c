//! Peak resident memory from procfs. The figures are process-wide, so with
//! several workers they over-report a single method's footprint; treat them as
//! approximate. Outside Linux both functions do nothing useful and report 0.

/// Resets the kernel's peak-RSS counter for this process, where supported.
pub fn reset_peak() {
    let _ = std::fs::write("/proc/self/clear_refs", "5");
}

/// `VmHWM` in MiB, or 0 when unavailable.
pub fn peak_mb() -> f64 {
    std::fs::read_to_string("/proc/self/status")
        .ok()
        .and_then(|status| {
            status
                .lines()
                .find(|l| l.starts_with("VmHWM:"))
                .and_then(|l| l.split_whitespace().nth(1))
                .and_then(|kb| kb.parse::<f64>().ok())
        })
        .map(|kb| kb / 1024.0)
        .unwrap_or(0.0)
}
