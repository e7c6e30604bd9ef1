//! Learning-rate schedules, evaluated per epoch.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ScheduleConfig {
    /// Divide `base_lr` by `decay_factor` at each milestone epoch.
    Multistep {
        base_lr: f64,
        milestones: Vec<usize>,
        decay_factor: f64,
    },
    /// Cosine annealing from `eta_max` to `eta_min`, restarting every
    /// `t_max` epochs.
    Cosine { eta_min: f64, eta_max: f64, t_max: usize },
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            ScheduleConfig::Multistep {
                base_lr,
                milestones,
                decay_factor,
            } => {
                if !(*base_lr > 0.0) {
                    return Err(Error::config("base_lr must be positive"));
                }
                if milestones.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::config("milestones must be strictly increasing"));
                }
                if !(*decay_factor > 1.0) {
                    return Err(Error::config("decay_factor must exceed 1"));
                }
            }
            ScheduleConfig::Cosine { eta_min, eta_max, t_max } => {
                if !(*eta_min >= 0.0 && eta_min < eta_max) {
                    return Err(Error::config("need 0 <= eta_min < eta_max"));
                }
                if *t_max < 1 {
                    return Err(Error::config("t_max must be at least 1"));
                }
            }
        }
        Ok(())
    }

    /// Learning rate used throughout `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self {
            ScheduleConfig::Multistep {
                base_lr,
                milestones,
                decay_factor,
            } => multistep_lr(*base_lr, milestones, *decay_factor, epoch),
            ScheduleConfig::Cosine { eta_min, eta_max, t_max } => {
                cosine_lr(*eta_min, *eta_max, *t_max, epoch % t_max)
            }
        }
    }
}

/// `base_lr / decay_factor^(number of milestones <= epoch)`.
pub fn multistep_lr(base_lr: f64, milestones: &[usize], decay_factor: f64, epoch: usize) -> f64 {
    let passed = milestones.iter().filter(|&&m| m <= epoch).count();
    base_lr / decay_factor.powi(passed as i32)
}

/// `eta_min + (eta_max - eta_min)(1 + cos(π t / t_max)) / 2` for `t` in `[0, t_max]`.
pub fn cosine_lr(eta_min: f64, eta_max: f64, t_max: usize, t: usize) -> f64 {
    debug_assert!(t <= t_max);
    eta_min + 0.5 * (eta_max - eta_min) * (1.0 + (PI * t as f64 / t_max as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_multistep() -> ScheduleConfig {
        ScheduleConfig::Multistep {
            base_lr: 0.02,
            milestones: vec![40, 80],
            decay_factor: 10.0,
        }
    }

    #[test]
    fn multistep_values() {
        let s = reference_multistep();
        assert!((s.lr_at(0) - 0.02).abs() < 1e-15);
        assert!((s.lr_at(39) - 0.02).abs() < 1e-15);
        assert!((s.lr_at(50) - 0.002).abs() < 1e-15);
        assert!((s.lr_at(100) - 0.0002).abs() < 1e-15);
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert!((cosine_lr(0.001, 0.02, 10, 0) - 0.02).abs() < 1e-15);
        assert!((cosine_lr(0.001, 0.02, 10, 10) - 0.001).abs() < 1e-15);
        assert!((cosine_lr(0.001, 0.02, 10, 5) - 0.0105).abs() < 1e-15);
    }

    #[test]
    fn cosine_restarts_each_period() {
        let s = ScheduleConfig::Cosine {
            eta_min: 0.001,
            eta_max: 0.02,
            t_max: 10,
        };
        assert_eq!(s.lr_at(10), s.lr_at(0));
        assert_eq!(s.lr_at(23), s.lr_at(3));
        for t in 0..9 {
            assert!(s.lr_at(t + 1) <= s.lr_at(t));
        }
    }

    #[test]
    fn multistep_is_non_increasing() {
        let s = reference_multistep();
        for e in 0..200 {
            assert!(s.lr_at(e + 1) <= s.lr_at(e));
        }
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        let bad = [
            ScheduleConfig::Multistep {
                base_lr: 0.1,
                milestones: vec![80, 40],
                decay_factor: 10.0,
            },
            ScheduleConfig::Multistep {
                base_lr: 0.1,
                milestones: vec![40],
                decay_factor: 1.0,
            },
            ScheduleConfig::Cosine {
                eta_min: 0.02,
                eta_max: 0.001,
                t_max: 10,
            },
            ScheduleConfig::Cosine {
                eta_min: 0.0,
                eta_max: 0.1,
                t_max: 0,
            },
        ];
        for s in bad {
            assert!(s.validate().is_err(), "{s:?}");
        }
        assert!(reference_multistep().validate().is_ok());
    }

    #[test]
    fn parses_from_toml_and_rejects_unknown_keys() {
        let s: ScheduleConfig = toml::from_str("kind = \"cosine\"\neta_min = 0.001\neta_max = 0.02\nt_max = 10").unwrap();
        assert_eq!(
            s,
            ScheduleConfig::Cosine {
                eta_min: 0.001,
                eta_max: 0.02,
                t_max: 10
            }
        );
        let typo = toml::from_str::<ScheduleConfig>("kind = \"cosine\"\neta_min = 0.001\neta_mx = 0.02\nt_max = 10");
        assert!(typo.is_err());
    }
}
