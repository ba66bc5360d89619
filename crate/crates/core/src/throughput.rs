//! Benchmark accounting. "MB" is 10^6 bytes and "MiB" is 2^20 bytes.

pub const MB: f64 = 1_000_000.0;
pub const MIB: f64 = 1_048_576.0;

/// Decimal megabytes per second; 0 for a non-positive interval.
pub fn mb_per_s(bytes: u64, seconds: f64) -> f64 {
    if seconds > 0.0 {
        bytes as f64 / MB / seconds
    } else {
        0.0
    }
}

pub fn mib_per_s(bytes: u64, seconds: f64) -> f64 {
    if seconds > 0.0 {
        bytes as f64 / MIB / seconds
    } else {
        0.0
    }
}

/// Loop-mode accounting: samples consumed times average sample size.
pub fn accounted_bytes(samples: u64, avg_sample_bytes: f64) -> u64 {
    (samples as f64 * avg_sample_bytes).round() as u64
}

/// Worker counts for a ramp of 1..=`max_consumers` consumers.
pub fn worker_ramp(max_consumers: usize, workers_per_consumer: usize) -> impl Iterator<Item = usize> {
    (1..=max_consumers).map(move |c| c * workers_per_consumer)
}
