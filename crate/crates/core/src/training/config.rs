//! Training hyperparameters and the one-cycle learning-rate schedule.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::AugmentConfig;
use crate::error::{Error, Result};
use crate::nnet::ParamGroup;

/// Fraction of a stage spent warming up.
pub const WARMUP_FRACTION: f64 = 0.3;
/// Warm-up starts at `lr_max / WARMUP_DIV`.
pub const WARMUP_DIV: f64 = 25.0;
/// The stage ends at `lr_max / FINAL_DIV`.
pub const FINAL_DIV: f64 = 1e4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocalConfig {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig {
            alpha: 0.25,
            gamma: 5.0,
        }
    }
}

impl FocalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "focal alpha {} outside (0, 1]",
                self.alpha
            )));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "focal gamma {} must be finite and nonnegative",
                self.gamma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
            batch_size: 16,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidConfig(format!("{name} {b} outside [0, 1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "epsilon {} must be positive",
                self.epsilon
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Which parameter groups a stage updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnfreezeLevel {
    #[serde(rename = "head")]
    Head,
    #[serde(rename = "head+last")]
    HeadLast,
    #[serde(rename = "all")]
    All,
}

impl UnfreezeLevel {
    pub fn trains(self, group: ParamGroup) -> bool {
        match (self, group) {
            (_, ParamGroup::Head) => true,
            (UnfreezeLevel::HeadLast | UnfreezeLevel::All, ParamGroup::Last) => true,
            (UnfreezeLevel::All, ParamGroup::Early) => true,
            _ => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub lr_max: f64,
    /// Epochs in the stage.
    pub cycles: usize,
    pub unfreeze_level: UnfreezeLevel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub stages: Vec<StageConfig>,
    /// Rate divisors for the early backbone, last backbone stage and head.
    pub lr_array_divisors: [f64; 3],
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig::with_cycles([40, 40, 40])
    }
}

impl ScheduleConfig {
    /// The three default stages with the given epoch counts.
    pub fn with_cycles(cycles: [usize; 3]) -> Self {
        let levels = [UnfreezeLevel::Head, UnfreezeLevel::HeadLast, UnfreezeLevel::All];
        let rates = [0.01, 0.0025, 0.0025];
        ScheduleConfig {
            stages: (0..3)
                .map(|i| StageConfig {
                    lr_max: rates[i],
                    cycles: cycles[i],
                    unfreeze_level: levels[i],
                })
                .collect(),
            lr_array_divisors: [100.0, 10.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidConfig("schedule has no stages".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if !(s.lr_max > 0.0) || !s.lr_max.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "stage {}: lr_max {} must be positive",
                    i + 1,
                    s.lr_max
                )));
            }
            if s.cycles == 0 {
                return Err(Error::InvalidConfig(format!(
                    "stage {}: cycles must be at least 1",
                    i + 1
                )));
            }
        }
        if self.lr_array_divisors.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "lr divisors {:?} must be positive",
                self.lr_array_divisors
            )));
        }
        Ok(())
    }

    pub fn group_rate(&self, stage_rate: f64, group: ParamGroup) -> f64 {
        stage_rate / self.lr_array_divisors[group.index()]
    }
}

/// Rate at `step` of a one-cycle stage lasting `total_steps` steps: linear
/// warm-up from `lr_max / 25` to `lr_max` at step `⌊0.3 · total⌋`, then
/// cosine annealing to `lr_max / 1e4` at the final step.
pub fn lr_at(step: usize, total_steps: usize, lr_max: f64) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::OutOfRange(format!(
            "step {step} outside a stage of {total_steps} steps"
        )));
    }
    let start = lr_max / WARMUP_DIV;
    let end = lr_max / FINAL_DIV;
    let peak = (WARMUP_FRACTION * total_steps as f64).floor() as usize;
    if step < peak {
        return Ok(start + (lr_max - start) * step as f64 / peak as f64);
    }
    let span = total_steps - 1 - peak;
    if span == 0 {
        return Ok(if step == 0 { start } else { end });
    }
    let t = (step - peak) as f64 / span as f64;
    Ok(end + (lr_max - end) * 0.5 * (1.0 + (PI * t).cos()))
}

/// Everything `train` needs besides the model and the data. Field names
/// mirror the JSON config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub focal: FocalConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub augment: AugmentConfig,
    /// Weight of the box-regression term.
    pub box_weight: f64,
    pub pos_threshold: f64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            focal: FocalConfig::default(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            augment: AugmentConfig::default(),
            box_weight: 1.0,
            pos_threshold: 0.5,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.focal.validate()?;
        self.optimizer.validate()?;
        self.schedule.validate()?;
        self.augment.validate()?;
        if !(self.box_weight >= 0.0) || !self.box_weight.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "box_weight {} must be finite and nonnegative",
                self.box_weight
            )));
        }
        if !(self.pos_threshold > 0.0 && self.pos_threshold <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "pos_threshold {} outside (0, 1]",
                self.pos_threshold
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidConfig(format!(
                "val_fraction {} outside [0, 1)",
                self.val_fraction
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.focal.alpha, c.focal.gamma), (0.25, 5.0));
        assert_eq!((c.optimizer.beta1, c.optimizer.beta2), (0.9, 0.99));
        assert_eq!(c.optimizer.batch_size, 16);
        let s = &c.schedule.stages;
        assert_eq!(s.len(), 3);
        assert_eq!((s[0].lr_max, s[0].cycles), (0.01, 40));
        assert_eq!((s[1].lr_max, s[2].lr_max), (0.0025, 0.0025));
        assert_eq!(c.schedule.lr_array_divisors, [100.0, 10.0, 1.0]);
        assert_eq!(c.val_fraction, 0.1);
        c.validate().unwrap();
    }

    #[test]
    fn schedule_landmarks() {
        let total = 100;
        assert!((lr_at(0, total, 0.01).unwrap() - 0.01 / 25.0).abs() < 1e-15);
        assert!((lr_at(30, total, 0.01).unwrap() - 0.01).abs() < 1e-15);
        assert!((lr_at(99, total, 0.01).unwrap() - 1e-6).abs() < 1e-12);
        assert!(lr_at(100, total, 0.01).is_err());
        // monotone up, then monotone down
        let lrs: Vec<f64> = (0..total).map(|s| lr_at(s, total, 0.01).unwrap()).collect();
        assert!(lrs[..=30].windows(2).all(|w| w[0] < w[1]));
        assert!(lrs[30..].windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn tiny_stages_stay_in_range() {
        for total in 1..6 {
            for s in 0..total {
                let lr = lr_at(s, total, 1.0).unwrap();
                assert!((1e-4..=1.0).contains(&lr), "{total} {s} {lr}");
            }
            assert!((lr_at(total - 1, total, 1.0).unwrap() - 1e-4).abs() < 1e-12 || total == 1);
        }
    }

    #[test]
    fn group_rates_and_levels() {
        let s = ScheduleConfig::default();
        assert!((s.group_rate(0.01, ParamGroup::Early) - 1e-4).abs() < 1e-18);
        assert!((s.group_rate(0.01, ParamGroup::Last) - 1e-3).abs() < 1e-18);
        assert_eq!(s.group_rate(0.01, ParamGroup::Head), 0.01);
        assert!(UnfreezeLevel::Head.trains(ParamGroup::Head));
        assert!(!UnfreezeLevel::Head.trains(ParamGroup::Last));
        assert!(UnfreezeLevel::HeadLast.trains(ParamGroup::Last));
        assert!(!UnfreezeLevel::HeadLast.trains(ParamGroup::Early));
        assert!(UnfreezeLevel::All.trains(ParamGroup::Early));
    }

    #[test]
    fn json_round_trip_and_partial_files() {
        let c = TrainConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert!(text.contains("\"head+last\""));
        assert_eq!(serde_json::from_str::<TrainConfig>(&text).unwrap(), c);
        let partial: TrainConfig = serde_json::from_str(r#"{"focal": {"gamma": 2}}"#).unwrap();
        assert_eq!(partial.focal.alpha, 0.25);
        assert_eq!(partial.focal.gamma, 2.0);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let mut c = TrainConfig::default();
        c.focal.alpha = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.optimizer.beta2 = 1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.schedule.stages[1].cycles = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.schedule.stages[0].lr_max = -1.0;
        assert!(c.validate().is_err());
    }
}
