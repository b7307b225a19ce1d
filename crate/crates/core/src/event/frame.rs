//! Collapse an event stream into a single grayscale frame.
//!
//! Per-pixel signed polarity counts are mapped around mid-gray: zero events
//! is exactly 0.5, positive counts brighten, negative darken. The gain is
//! normalized per frame by the 95th percentile of the nonzero |count|
//! population so a handful of hot pixels cannot crush the rest of the range.

use super::{EventError, EventStream, ImagePlane};

/// Accumulates events with `t0 ≤ t ≤ t1` (inclusive window).
pub fn synthesize_frame(
    stream: &EventStream,
    t0: u64,
    t1: u64,
) -> Result<ImagePlane, EventError> {
    if t0 > t1 {
        return Err(EventError::Validation(format!(
            "window start {t0} after end {t1}"
        )));
    }
    let h = stream.sensor_h() as usize;
    let w = stream.sensor_w() as usize;
    let mut counts = vec![0i64; h * w];
    for ev in stream.events() {
        if ev.t < t0 || ev.t > t1 {
            continue;
        }
        counts[ev.y as usize * w + ev.x as usize] += ev.p as i64;
    }

    let mut magnitudes: Vec<i64> = counts.iter().map(|c| c.abs()).filter(|&c| c > 0).collect();
    if magnitudes.is_empty() {
        return Ok(ImagePlane::filled(h, w, 1, 0.5));
    }
    magnitudes.sort_unstable();
    let p95 = percentile95_nearest_rank(&magnitudes) as f64;
    let gain = 0.5 / p95.max(1.0);

    let pixels: Vec<f64> = counts
        .iter()
        .map(|&s| (0.5 + gain * s as f64).clamp(0.0, 1.0))
        .collect();
    ImagePlane::new(h, w, 1, pixels)
}

/// Nearest-rank percentile: element at 1-based rank ⌈0.95·n⌉ of a sorted
/// ascending slice.
fn percentile95_nearest_rank(sorted: &[i64]) -> i64 {
    let n = sorted.len();
    let rank = (0.95 * n as f64).ceil() as usize;
    sorted[rank.max(1) - 1]
}
