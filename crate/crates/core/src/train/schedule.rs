use crate::error::{Error, Result};

/// Number of ramp steps: `ceil(warmup_ratio * total_steps)`.
///
/// A 1e-9 guard keeps products like `0.03 * 300` from rounding up past an
/// integer they equal exactly.
pub fn warmup_steps(total_steps: usize, warmup_ratio: f64) -> usize {
    (warmup_ratio * total_steps as f64 - 1e-9).ceil().max(0.0) as usize
}

/// Linear ramp from 0 to `peak_lr` over the warm-up steps, then constant.
pub fn lr_at(step: usize, total_steps: usize, warmup_ratio: f64, peak_lr: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::invalid(format!("step {step} beyond total {total_steps}")));
    }
    if !(0.0..1.0).contains(&warmup_ratio) {
        return Err(Error::InvalidConfig(format!("warmup_ratio {warmup_ratio} not in [0, 1)")));
    }
    let warm = warmup_steps(total_steps, warmup_ratio);
    if warm == 0 || step >= warm {
        return Ok(peak_lr);
    }
    Ok(peak_lr * step as f64 / warm as f64)
}
