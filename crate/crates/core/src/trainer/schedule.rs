use crate::error::{invalid, Result};

/// Number of linear warmup steps, `ceil(warmup_ratio * total)`.
pub fn warmup_steps(total_steps: u64, warmup_ratio: f64) -> u64 {
    ((warmup_ratio * total_steps as f64).ceil() as u64).min(total_steps)
}

/// Linear ramp from 0 to `peak` over the warmup, then cosine decay to 0 at
/// `total_steps`.
pub fn lr_at(step: u64, peak: f64, warmup_ratio: f64, total_steps: u64) -> Result<f64> {
    if step > total_steps {
        return Err(invalid!("step {step} beyond total_steps {total_steps}"));
    }
    let warm = warmup_steps(total_steps, warmup_ratio);
    if step < warm {
        return Ok(peak * step as f64 / warm as f64);
    }
    let decay = total_steps - warm;
    if decay == 0 {
        return Ok(peak);
    }
    let progress = (step - warm) as f64 / decay as f64;
    Ok(0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        let (peak, total) = (3e-4, 1000);
        assert_eq!(lr_at(0, peak, 0.01, total).unwrap(), 0.0);
        assert_eq!(warmup_steps(total, 0.01), 10);
        assert_eq!(lr_at(10, peak, 0.01, total).unwrap(), peak);
        assert!(lr_at(total, peak, 0.01, total).unwrap().abs() < 1e-20);
        assert!((lr_at(5, peak, 0.01, total).unwrap() - peak / 2.0).abs() < 1e-18);
        assert!(lr_at(total + 1, peak, 0.01, total).is_err());
    }

    #[test]
    fn midpoint_of_decay_is_half_peak() {
        // warmup 10 of 1010, decay spans 1000 steps
        let lr = lr_at(510, 1.0, 0.0099, 1010).unwrap();
        assert_eq!(warmup_steps(1010, 0.0099), 10);
        assert!((lr - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ceil_rounds_tiny_warmups_up() {
        assert_eq!(warmup_steps(50, 0.01), 1);
        assert_eq!(lr_at(1, 2.0, 0.01, 50).unwrap(), 2.0);
    }
}
