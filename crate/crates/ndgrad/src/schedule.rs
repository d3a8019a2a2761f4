//! Linear warmup followed by cosine decay.

use std::f64::consts::PI;

use crate::error::{GradError, Result};

/// Number of warmup steps: `ceil(warmup_ratio * total_steps)`.
pub fn warmup_steps(total_steps: u64, warmup_ratio: f64) -> u64 {
    (warmup_ratio * total_steps as f64).ceil() as u64
}

/// Learning rate at `step` (0-based) of a run with `total_steps` updates.
///
/// Ramps linearly from 0 to `base_lr` over the warmup, then follows a half
/// cosine down to 0 at `step == total_steps`.
pub fn lr_at_step(step: u64, total_steps: u64, warmup_ratio: f64, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(GradError::InvalidArgument(
            "total_steps must be positive".into(),
        ));
    }
    if !(0.0..=1.0).contains(&warmup_ratio) {
        return Err(GradError::InvalidArgument(format!(
            "warmup ratio {warmup_ratio} outside [0, 1]"
        )));
    }
    if step > total_steps {
        return Err(GradError::InvalidArgument(format!(
            "step {step} beyond total {total_steps}"
        )));
    }
    let warmup = warmup_steps(total_steps, warmup_ratio);
    if step < warmup {
        return Ok(base_lr * step as f64 / warmup as f64);
    }
    if warmup == total_steps {
        return Ok(base_lr);
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(0.5 * base_lr * (1.0 + (PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_terminal_and_midpoint() {
        let base = 6e-4;
        // 100 steps, 10 warmup
        assert_eq!(lr_at_step(10, 100, 0.1, base).unwrap(), base);
        assert!(lr_at_step(100, 100, 0.1, base).unwrap().abs() < 1e-18);
        assert!((lr_at_step(55, 100, 0.1, base).unwrap() - base / 2.0).abs() < 1e-12);
        assert_eq!(lr_at_step(0, 100, 0.1, base).unwrap(), 0.0);
        assert!((lr_at_step(5, 100, 0.1, base).unwrap() - base / 2.0).abs() < 1e-18);
    }

    #[test]
    fn zero_total_is_rejected() {
        assert!(lr_at_step(0, 0, 0.1, 1.0).is_err());
    }

    #[test]
    fn no_warmup_starts_at_base() {
        assert_eq!(lr_at_step(0, 10, 0.0, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn schedule_is_non_increasing_after_warmup() {
        let mut prev = f64::INFINITY;
        for s in 10..=100 {
            let lr = lr_at_step(s, 100, 0.1, 1.0).unwrap();
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
    }
}
