//! Per-epoch learning-rate and weight-decay schedules.



/// Linear warmup followed by exponential decay for the learning rate, and a
/// clamped linear ramp for the weight decay factor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub warmup_start_factor: f64,
    pub max_lr: f64,
    pub warmup_epochs: u32,
    pub decay: f64,
    pub wd_start: f64,
    pub wd_max: f64,
    pub wd_ramp_epochs: u32,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            warmup_start_factor: 0.3,
            max_lr: 0.000625,
            warmup_epochs: 30,
            decay: 0.995,
            wd_start: 0.1,
            wd_max: 0.4,
            wd_ramp_epochs: 1000,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.warmup_start_factor > 0.0 && self.warmup_start_factor <= 1.0) {
            return Err(format!("warmup_start_factor {} not in (0, 1]", self.warmup_start_factor));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(format!("decay {} not in (0, 1]", self.decay));
        }
        if self.wd_start > self.wd_max {
            return Err(format!("wd_start {} exceeds wd_max {}", self.wd_start, self.wd_max));
        }
        if !(self.max_lr > 0.0) {
            return Err(format!("max_lr {} must be positive", self.max_lr));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: u32) -> f64 {
        lr_at(epoch, self)
    }

    pub fn wd_at(&self, epoch: u32) -> f64 {
        wd_at(epoch, self)
    }
}

pub fn lr_at(epoch: u32, s: &Schedule) -> f64 {
    if epoch < s.warmup_epochs {
        let frac = epoch as f64 / s.warmup_epochs as f64;
        let factor = s.warmup_start_factor + (1.0 - s.warmup_start_factor) * frac;
        s.max_lr * factor
    } else {
        s.max_lr * s.decay.powi((epoch - s.warmup_epochs) as i32)
    }
}

pub fn wd_at(epoch: u32, s: &Schedule) -> f64 {
    if s.wd_ramp_epochs == 0 {
        return s.wd_max;
    }
    let frac = (epoch as f64 / s.wd_ramp_epochs as f64).min(1.0);
    s.wd_start + (s.wd_max - s.wd_start) * frac
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learning_rate_reference_points() {
        let s = Schedule::default();
        assert!((lr_at(0, &s) - 1.875e-4).abs() < 1e-15);
        assert!((lr_at(30, &s) - 0.000625).abs() < 1e-15);
        assert!((lr_at(31, &s) - 0.000625 * 0.995).abs() < 1e-15);
    }

    #[test]
    fn learning_rate_continuous_at_warmup_end() {
        let s = Schedule::default();
        let ramp_end = s.max_lr * (s.warmup_start_factor + (1.0 - s.warmup_start_factor));
        assert!((ramp_end - lr_at(s.warmup_epochs, &s)).abs() < 1e-15);
        assert!(lr_at(29, &s) < lr_at(30, &s));
    }

    #[test]
    fn weight_decay_reference_points() {
        let s = Schedule::default();
        assert!((wd_at(0, &s) - 0.1).abs() < 1e-15);
        assert!((wd_at(500, &s) - 0.25).abs() < 1e-15);
        assert!((wd_at(1000, &s) - 0.4).abs() < 1e-15);
        assert!((wd_at(5000, &s) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn validation_rejects_bad_factors() {
        let mut s = Schedule::default();
        s.decay = 1.5;
        assert!(s.validate().is_err());
        let mut s = Schedule::default();
        s.wd_start = 0.5;
        assert!(s.validate().is_err());
        assert!(Schedule::default().validate().is_ok());
    }
}
