use std::f64::consts::PI;

use super::NumericsError;

/// Linear warmup to each group's peak rate, then cosine decay to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    max_lr: Vec<f64>,
    total_steps: usize,
    warmup_steps: usize,
}

impl LrSchedule {
    pub fn new(max_lr: Vec<f64>, total_steps: usize, warmup_fraction: f64) -> Result<Self, NumericsError> {
        if max_lr.is_empty() || max_lr.iter().any(|lr| !(lr.is_finite() && *lr > 0.0)) {
            return Err(NumericsError::InvalidSchedule(format!("peak rates {max_lr:?} must be positive")));
        }
        if !(warmup_fraction > 0.0 && warmup_fraction < 1.0) {
            return Err(NumericsError::InvalidSchedule(format!("warmup fraction {warmup_fraction} outside (0, 1)")));
        }
        let warmup_steps = ((warmup_fraction * total_steps as f64).round() as usize).max(1);
        if warmup_steps >= total_steps {
            return Err(NumericsError::InvalidSchedule(format!(
                "{total_steps} steps leave no room for decay after {warmup_steps} warmup steps"
            )));
        }
        Ok(LrSchedule {
            max_lr,
            total_steps,
            warmup_steps,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_steps
    }

    pub fn groups(&self) -> usize {
        self.max_lr.len()
    }

    /// Fraction of the peak rate at `step`.
    pub fn factor(&self, step: usize) -> Result<f64, NumericsError> {
        if step > self.total_steps {
            return Err(NumericsError::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        if step <= self.warmup_steps {
            return Ok(step as f64 / self.warmup_steps as f64);
        }
        let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        Ok(0.5 * (1.0 + (PI * progress).cos()))
    }

    pub fn lr_at_step(&self, group: usize, step: usize) -> Result<f64, NumericsError> {
        Ok(self.max_lr[group] * self.factor(step)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> LrSchedule {
        LrSchedule::new(vec![0.4, 0.002], 1000, 0.05).unwrap()
    }

    #[test]
    fn peak_at_end_of_warmup() {
        let s = sched();
        assert_eq!(s.warmup_steps(), 50);
        assert_eq!(s.lr_at_step(0, 50).unwrap(), 0.4);
        assert_eq!(s.lr_at_step(1, 50).unwrap(), 0.002);
        assert_eq!(s.lr_at_step(0, 0).unwrap(), 0.0);
    }

    #[test]
    fn zero_at_the_end() {
        assert!(sched().lr_at_step(0, 1000).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn half_at_decay_midpoint() {
        // warmup 50, decay spans 950 steps, midpoint 50 + 475
        let lr = sched().lr_at_step(0, 525).unwrap();
        assert!((lr - 0.2).abs() < 1e-12);
    }

    #[test]
    fn continuous_at_boundary() {
        let s = sched();
        let eps = 1e-9;
        // the decay formula evaluated at progress 0 equals the warmup end value
        let at = s.factor(50).unwrap();
        let decay_start = 0.5 * (1.0 + (PI * 0.0).cos());
        assert!((at - decay_start).abs() <= 1e-12);
        assert!((s.factor(51).unwrap() - at).abs() < 1e-4 + eps);
    }

    #[test]
    fn rejects_out_of_range_and_bad_config() {
        assert!(matches!(sched().factor(1001), Err(NumericsError::StepOutOfRange { .. })));
        assert!(LrSchedule::new(vec![0.1], 1, 0.05).is_err());
        assert!(LrSchedule::new(vec![0.0], 100, 0.05).is_err());
        assert!(LrSchedule::new(vec![0.1], 100, 1.0).is_err());
        // warmup rounds up to at least one step
        assert_eq!(LrSchedule::new(vec![0.1], 4, 0.05).unwrap().warmup_steps(), 1);
    }
}
