//! Clock offset, drift, and inter-node synchronization error.
//!
//! A node's local clock reads `t_local = t_true + offset_s` at session start
//! and ticks at `1 + drift_ppm·1e-6` of true rate. Offsets are constant over a
//! session; drift only scales measured durations.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default bound on |drift|. Oscillators outside ±100 ppm are treated as a
/// configuration mistake.
pub const MAX_ABS_DRIFT_PPM: f64 = 100.0;

/// Below this acceptance probability truncated-normal rejection sampling is refused.
const MIN_TND_ACCEPTANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClockState {
    pub offset_s: f64,
    pub drift_ppm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SyncErrorModel {
    #[default]
    Perfect,
    TruncatedNormal {
        mean_s: f64,
        std_s: f64,
        lower_s: f64,
        upper_s: f64,
    },
}

impl SyncErrorModel {
    /// Zero-mean model truncated symmetrically at `k_sigma` standard deviations.
    pub fn symmetric(std_s: f64, k_sigma: f64) -> Self {
        SyncErrorModel::TruncatedNormal {
            mean_s: 0.0,
            std_s,
            lower_s: -k_sigma * std_s,
            upper_s: k_sigma * std_s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let SyncErrorModel::TruncatedNormal {
            mean_s,
            std_s,
            lower_s,
            upper_s,
        } = *self
        {
            let all_finite = [mean_s, std_s, lower_s, upper_s].iter().all(|v| v.is_finite());
            if !all_finite || std_s < 0.0 || lower_s >= upper_s || mean_s < lower_s || mean_s > upper_s
            {
                return Err(Error::Model(format!(
                    "invalid truncated normal: mean {mean_s}, std {std_s}, bounds [{lower_s}, {upper_s}]"
                )));
            }
            if std_s > 0.0 && acceptance_probability(mean_s, std_s, lower_s, upper_s) < MIN_TND_ACCEPTANCE
            {
                return Err(Error::Model(format!(
                    "truncation interval [{lower_s}, {upper_s}] holds negligible mass"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftModel {
    Fixed { ppm: f64 },
    UniformSymmetric { max_abs_ppm: f64 },
}

impl Default for DriftModel {
    fn default() -> Self {
        DriftModel::Fixed { ppm: 0.0 }
    }
}

impl DriftModel {
    pub fn validate(&self) -> Result<()> {
        let bad = match *self {
            DriftModel::Fixed { ppm } => !ppm.is_finite() || ppm.abs() > MAX_ABS_DRIFT_PPM,
            DriftModel::UniformSymmetric { max_abs_ppm } => {
                !max_abs_ppm.is_finite() || !(0.0..=MAX_ABS_DRIFT_PPM).contains(&max_abs_ppm)
            }
        };
        if bad {
            return Err(Error::Model(format!(
                "drift model {self:?} outside ±{MAX_ABS_DRIFT_PPM} ppm"
            )));
        }
        Ok(())
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn acceptance_probability(mean: f64, std: f64, lower: f64, upper: f64) -> f64 {
    std_normal_cdf((upper - mean) / std) - std_normal_cdf((lower - mean) / std)
}

/// Draws an independent clock for one node.
pub fn sample_clock<R: Rng + ?Sized>(
    sync: &SyncErrorModel,
    drift: &DriftModel,
    rng: &mut R,
) -> Result<ClockState> {
    sync.validate()?;
    drift.validate()?;
    let offset_s = match *sync {
        SyncErrorModel::Perfect => 0.0,
        SyncErrorModel::TruncatedNormal {
            mean_s,
            std_s,
            lower_s,
            upper_s,
        } => {
            if std_s == 0.0 {
                mean_s
            } else {
                let normal = Normal::new(mean_s, std_s).map_err(|e| Error::Model(e.to_string()))?;
                loop {
                    let v = normal.sample(rng);
                    if (lower_s..=upper_s).contains(&v) {
                        break v;
                    }
                }
            }
        }
    };
    let drift_ppm = match *drift {
        DriftModel::Fixed { ppm } => ppm,
        DriftModel::UniformSymmetric { max_abs_ppm: 0.0 } => 0.0,
        DriftModel::UniformSymmetric { max_abs_ppm } => rng.random_range(-max_abs_ppm..=max_abs_ppm),
    };
    Ok(ClockState { offset_s, drift_ppm })
}

/// Duration of `true_duration_s` as counted by a clock with the given drift.
#[inline]
pub fn local_duration(true_duration_s: f64, clock: &ClockState) -> f64 {
    true_duration_s * (1.0 + clock.drift_ppm * 1e-6)
}
