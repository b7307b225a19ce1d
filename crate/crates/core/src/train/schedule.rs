//! Single-peak learning-rate schedule: cosine ramp from a floor up to the
//! peak over the warmup fraction of training, cosine anneal back down to the
//! floor over the remainder.

/// Learning rate at `step` of `total` steps. The floor is `peak ·
/// floor_frac`; `step = warmup_frac · total` returns exactly `peak`; both
/// endpoints return the floor. `step` past `total` clamps to the floor.
pub fn one_cycle_lr(step: u64, total: u64, peak: f64, warmup_frac: f64, floor_frac: f64) -> f64 {
    assert!(peak > 0.0 && (0.0..1.0).contains(&warmup_frac) && (0.0..=1.0).contains(&floor_frac));
    let floor = peak * floor_frac;
    if total == 0 {
        return peak;
    }
    let s = (step.min(total)) as f64;
    let warmup = warmup_frac * total as f64;
    let phase = if s <= warmup && warmup > 0.0 {
        // rising half-cosine: 0 at the start, 1 at the warmup point
        (1.0 - (std::f64::consts::PI * s / warmup).cos()) / 2.0
    } else {
        let u = (s - warmup) / (total as f64 - warmup);
        (1.0 + (std::f64::consts::PI * u).cos()) / 2.0
    };
    floor + (peak - floor) * phase
}

#[cfg(test)]
mod tests {
    use super::*;

    const PEAK: f64 = 7e-4;

    #[test]
    fn endpoints_and_peak_are_exact() {
        let lr0 = one_cycle_lr(0, 1000, PEAK, 0.1, 0.01);
        assert!((lr0 - 7e-6).abs() < 1e-18, "start {lr0}");
        let lr_peak = one_cycle_lr(100, 1000, PEAK, 0.1, 0.01);
        assert!((lr_peak - PEAK).abs() < 1e-18, "peak {lr_peak}");
        let lr_end = one_cycle_lr(1000, 1000, PEAK, 0.1, 0.01);
        assert!((lr_end - 7e-6).abs() < 1e-18, "end {lr_end}");
    }

    #[test]
    fn monotone_up_then_down_with_single_max() {
        let total = 500u64;
        let lrs: Vec<f64> = (0..=total).map(|s| one_cycle_lr(s, total, PEAK, 0.1, 0.01)).collect();
        let warmup_end = 50usize;
        for i in 1..=warmup_end {
            assert!(lrs[i] >= lrs[i - 1], "warmup not rising at {i}");
        }
        for i in warmup_end + 1..lrs.len() {
            assert!(lrs[i] <= lrs[i - 1], "decay not falling at {i}");
        }
        let max = lrs.iter().cloned().fold(0.0, f64::max);
        assert_eq!(max, lrs[warmup_end]);
        assert!(lrs.iter().all(|&lr| lr >= PEAK * 0.01 - 1e-18));
    }

    #[test]
    fn degenerate_totals_are_safe() {
        assert_eq!(one_cycle_lr(0, 0, PEAK, 0.1, 0.01), PEAK);
        // past-the-end clamps to the floor
        let lr = one_cycle_lr(2000, 1000, PEAK, 0.1, 0.01);
        assert!((lr - 7e-6).abs() < 1e-18);
    }
}
