use std::f64::consts::PI;

use crate::{Error, Result};

/// Linear warm-up from 0 to `lr0`, then cosine decay to `lr_min`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub lr0: f64,
    pub lr_min: f64,
    pub warmup: usize,
    pub total_epochs: usize,
}

impl CosineSchedule {
    pub fn new(lr0: f64, lr_min: f64, warmup: usize, total_epochs: usize) -> Result<Self> {
        if total_epochs <= warmup {
            return Err(Error::invalid(format!(
                "cosine schedule needs total_epochs ({total_epochs}) > warmup ({warmup})"
            )));
        }
        if !(lr0.is_finite() && lr0 > 0.0 && lr_min >= 0.0 && lr_min <= lr0) {
            return Err(Error::invalid(format!("need 0 <= lr_min ({lr_min}) <= lr0 ({lr0}) and lr0 > 0")));
        }
        Ok(CosineSchedule {
            lr0,
            lr_min,
            warmup,
            total_epochs,
        })
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        let epoch = epoch.min(self.total_epochs);
        if epoch < self.warmup {
            return self.lr0 * epoch as f64 / self.warmup as f64;
        }
        let progress = (epoch - self.warmup) as f64 / (self.total_epochs - self.warmup) as f64;
        self.lr_min + 0.5 * (self.lr0 - self.lr_min) * (1.0 + (PI * progress).cos())
    }
}

pub fn cosine_lr(epoch: usize, warmup: usize, total_epochs: usize, lr0: f64, lr_min: f64) -> Result<f64> {
    if epoch > total_epochs {
        return Err(Error::invalid(format!("epoch {epoch} beyond total {total_epochs}")));
    }
    Ok(CosineSchedule::new(lr0, lr_min, warmup, total_epochs)?.lr(epoch))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        assert_eq!(cosine_lr(0, 10, 120, 1e-3, 1e-6).unwrap(), 0.0);
        assert!((cosine_lr(10, 10, 120, 1e-3, 1e-6).unwrap() - 1e-3).abs() < 1e-18);
        assert!((cosine_lr(120, 10, 120, 1e-3, 1e-6).unwrap() - 1e-6).abs() < 1e-18);
        assert!((cosine_lr(5, 10, 120, 1e-3, 1e-6).unwrap() - 5e-4).abs() < 1e-18);
    }

    #[test]
    fn monotone_after_warmup() {
        let s = CosineSchedule::new(1e-3, 1e-6, 10, 50).unwrap();
        for e in 10..50 {
            assert!(s.lr(e + 1) <= s.lr(e));
        }
    }

    #[test]
    fn rejects_short_runs() {
        assert!(CosineSchedule::new(1e-3, 1e-6, 10, 10).is_err());
        assert!(cosine_lr(11, 2, 10, 1e-3, 1e-6).is_err());
    }
}
