//! Threshold-model event simulation from a grayscale frame sequence.
//!
//! Each pixel tracks a reference log-intensity `L_ref = ln(I + 1e-3)`.
//! Between consecutive frames the log-intensity is assumed linear in time;
//! every time it drifts a full threshold away from the reference, one event
//! fires at the interpolated crossing instant and the reference steps by
//! ±threshold. This is the classic simulator contract: identical frames are
//! silent, and a monotone ramp emits `floor(|ΔL|/threshold)` events.

use super::{EventError, EventPoint, EventStream, ImagePlane};

const LOG_EPS: f64 = 1e-3;

pub fn simulate_events(
    frames: &[ImagePlane],
    timestamps: &[u64],
    threshold: f64,
) -> Result<EventStream, EventError> {
    if frames.len() < 2 {
        return Err(EventError::Validation(format!(
            "need at least 2 frames, got {}",
            frames.len()
        )));
    }
    if timestamps.len() != frames.len() {
        return Err(EventError::Validation(format!(
            "{} timestamps for {} frames",
            timestamps.len(),
            frames.len()
        )));
    }
    if !(threshold > 0.0) {
        return Err(EventError::Validation(format!(
            "threshold must be positive, got {threshold}"
        )));
    }
    let (h, w) = (frames[0].h(), frames[0].w());
    for (i, f) in frames.iter().enumerate() {
        if f.channels() != 1 {
            return Err(EventError::Validation(format!(
                "frame {i} has {} channels, expected grayscale",
                f.channels()
            )));
        }
        if f.h() != h || f.w() != w {
            return Err(EventError::Validation(format!(
                "frame {i} is {}x{}, expected {h}x{w}",
                f.h(),
                f.w()
            )));
        }
    }
    for j in 1..timestamps.len() {
        if timestamps[j] <= timestamps[j - 1] {
            return Err(EventError::Validation(format!(
                "timestamps must be strictly increasing ({} then {})",
                timestamps[j - 1],
                timestamps[j]
            )));
        }
    }

    let mut events = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let mut l_ref = (frames[0].get(0, y, x) + LOG_EPS).ln();
            for j in 1..frames.len() {
                let l_prev = (frames[j - 1].get(0, y, x) + LOG_EPS).ln();
                let l_cur = (frames[j].get(0, y, x) + LOG_EPS).ln();
                let (t_prev, t_cur) = (timestamps[j - 1], timestamps[j]);
                while (l_cur - l_ref).abs() >= threshold {
                    let sign = if l_cur > l_ref { 1.0 } else { -1.0 };
                    let crossing = l_ref + sign * threshold;
                    let frac = (crossing - l_prev) / (l_cur - l_prev);
                    let t = t_prev + ((t_cur - t_prev) as f64 * frac).floor() as u64;
                    events.push(EventPoint {
                        t,
                        x: x as u32,
                        y: y as u32,
                        p: if sign > 0.0 { 1 } else { -1 },
                    });
                    l_ref = crossing;
                }
            }
        }
    }
    EventStream::new(w as u32, h as u32, events)
}

/// Independent single-pixel reference implementation used as the oracle for
/// [`simulate_events`]: same contract, but written directly over a scalar
/// intensity trajectory with no image plumbing.
pub fn simulate_pixel_scalar(
    intensities: &[f64],
    timestamps: &[u64],
    threshold: f64,
) -> Vec<(u64, i8)> {
    assert!(intensities.len() >= 2);
    assert_eq!(intensities.len(), timestamps.len());
    assert!(threshold > 0.0);
    let mut out = Vec::new();
    let mut reference = (intensities[0] + 1e-3).ln();
    for j in 1..intensities.len() {
        let from = (intensities[j - 1] + 1e-3).ln();
        let to = (intensities[j] + 1e-3).ln();
        loop {
            let delta = to - reference;
            if delta.abs() < threshold {
                break;
            }
            let step = if delta > 0.0 { threshold } else { -threshold };
            let level = reference + step;
            let frac = (level - from) / (to - from);
            let span = (timestamps[j] - timestamps[j - 1]) as f64;
            let t = timestamps[j - 1] + (span * frac).floor() as u64;
            out.push((t, if step > 0.0 { 1 } else { -1 }));
            reference = level;
        }
    }
    out
}
