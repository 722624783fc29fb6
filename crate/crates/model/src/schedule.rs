//! Learning-rate schedules.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::ModelError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Scheduler {
    #[default]
    None,
    Cosine {
        min_lr: f64,
    },
    CosineWithRestarts {
        min_lr: f64,
        /// Cycle length in schedule units.
        period: u64,
    },
    MultiStep {
        milestones: Vec<u64>,
        gamma: f64,
    },
}

impl Scheduler {
    pub fn name(&self) -> &'static str {
        match self {
            Scheduler::None => "none",
            Scheduler::Cosine { .. } => "cosine",
            Scheduler::CosineWithRestarts { .. } => "cosine_with_restarts",
            Scheduler::MultiStep { .. } => "multi_step",
        }
    }

    pub fn validate(&self, base_lr: f64) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidSchedule(m));
        if !(base_lr.is_finite() && base_lr >= 0.0) {
            return bad(format!("learning rate {base_lr} must be finite and non-negative"));
        }
        match self {
            Scheduler::None => Ok(()),
            Scheduler::Cosine { min_lr } | Scheduler::CosineWithRestarts { min_lr, .. } => {
                if !(min_lr.is_finite() && *min_lr >= 0.0 && *min_lr <= base_lr) {
                    return bad(format!("min_lr {min_lr} must lie in [0, {base_lr}]"));
                }
                if let Scheduler::CosineWithRestarts { period: 0, .. } = self {
                    return bad("restart period must be positive".into());
                }
                Ok(())
            }
            Scheduler::MultiStep { milestones, gamma } => {
                if !(gamma.is_finite() && *gamma > 0.0 && *gamma <= 1.0) {
                    return bad(format!("gamma {gamma} must lie in (0, 1]"));
                }
                if milestones.windows(2).any(|w| w[0] >= w[1]) {
                    return bad("milestones must be strictly increasing".into());
                }
                Ok(())
            }
        }
    }
}

/// Learning rate at `step` of `total_steps`.
pub fn lr_schedule(base_lr: f64, scheduler: &Scheduler, step: u64, total_steps: u64) -> Result<f64, ModelError> {
    scheduler.validate(base_lr)?;
    if step > total_steps {
        return Err(ModelError::InvalidSchedule(format!("step {step} exceeds total_steps {total_steps}")));
    }
    let cosine = |min_lr: f64, pos: u64, len: u64| {
        if len == 0 {
            return base_lr;
        }
        min_lr + (base_lr - min_lr) * 0.5 * (1.0 + (PI * pos as f64 / len as f64).cos())
    };
    Ok(match scheduler {
        Scheduler::None => base_lr,
        Scheduler::Cosine { min_lr } => cosine(*min_lr, step, total_steps),
        Scheduler::CosineWithRestarts { min_lr, period } => cosine(*min_lr, step % period, *period),
        Scheduler::MultiStep { milestones, gamma } => {
            let passed = milestones.iter().filter(|&&m| m <= step).count();
            base_lr * gamma.powi(passed as i32)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn none_is_constant() {
        for s in [0, 5, 100] {
            assert_eq!(lr_schedule(3e-4, &Scheduler::None, s, 100).unwrap(), 3e-4);
        }
    }

    #[test]
    fn cosine_endpoints() {
        let s = Scheduler::Cosine { min_lr: 1e-5 };
        assert_eq!(lr_schedule(1e-3, &s, 0, 1000).unwrap(), 1e-3);
        assert!((lr_schedule(1e-3, &s, 1000, 1000).unwrap() - 1e-5).abs() < 1e-18);
        let mid = lr_schedule(1e-3, &s, 500, 1000).unwrap();
        assert!((mid - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for step in 0..=1000 {
            let lr = lr_schedule(1e-3, &s, step, 1000).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn restarts_repeat() {
        let s = Scheduler::CosineWithRestarts { min_lr: 7e-5, period: 100 };
        for step in 0..100 {
            let a = lr_schedule(5e-4, &s, step, 1000).unwrap();
            let b = lr_schedule(5e-4, &s, step + 300, 1000).unwrap();
            assert_eq!(a, b);
        }
        assert_eq!(lr_schedule(5e-4, &s, 200, 1000).unwrap(), 5e-4);
        assert!(lr_schedule(5e-4, &s, 199, 1000).unwrap() < 7.1e-5);
    }

    #[test]
    fn multi_step_example() {
        let s = Scheduler::MultiStep {
            milestones: vec![10],
            gamma: 0.5,
        };
        assert_eq!(lr_schedule(1e-3, &s, 9, 100).unwrap(), 1e-3);
        assert_eq!(lr_schedule(1e-3, &s, 10, 100).unwrap(), 5e-4);
        let two = Scheduler::MultiStep {
            milestones: vec![10, 20],
            gamma: 0.2,
        };
        assert!((lr_schedule(1e-3, &two, 25, 100).unwrap() - 4e-5).abs() < 1e-18);
    }

    #[test]
    fn invalid_parameters() {
        assert!(lr_schedule(1e-3, &Scheduler::None, 11, 10).is_err());
        assert!(lr_schedule(-1.0, &Scheduler::None, 0, 10).is_err());
        assert!(lr_schedule(1e-3, &Scheduler::Cosine { min_lr: 1e-2 }, 0, 10).is_err());
        assert!(lr_schedule(1e-3, &Scheduler::CosineWithRestarts { min_lr: 0.0, period: 0 }, 0, 10).is_err());
        let unsorted = Scheduler::MultiStep {
            milestones: vec![5, 3],
            gamma: 0.5,
        };
        assert!(lr_schedule(1e-3, &unsorted, 0, 10).is_err());
        let big_gamma = Scheduler::MultiStep {
            milestones: vec![5],
            gamma: 1.5,
        };
        assert!(lr_schedule(1e-3, &big_gamma, 0, 10).is_err());
    }

    #[test]
    fn serde_shape() {
        let s: Scheduler = serde_json::from_str(r#"{"kind":"multi_step","milestones":[10],"gamma":0.5}"#).unwrap();
        assert_eq!(s.name(), "multi_step");
        let n: Scheduler = serde_json::from_str(r#"{"kind":"none"}"#).unwrap();
        assert_eq!(n, Scheduler::None);
    }
}
