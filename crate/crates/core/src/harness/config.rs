use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_kitti_dir, AugmentConfig, Dataset, SynthConfig};
use crate::detection::LossConfig;
use crate::error::{Error, Result};
use crate::metrics::EvalThresholds;
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// `count` generated scenes with seeds `seed, seed + 1, …`.
    Synthetic { count: usize, seed: u64, synth: SynthConfig },
    /// A directory in KITTI layout.
    Kitti { root: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSpec {
    pub source: DataSource,
    /// Fraction of scenes kept, drawn with the run seed.
    pub subsample: f64,
    pub augment: bool,
    pub augmentation: AugmentConfig,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic {
                count: 200,
                seed: 0,
                synth: SynthConfig::default(),
            },
            subsample: 1.0,
            augment: true,
            augmentation: AugmentConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from the peak rate to zero at the last step.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Linear learning-rate ramp from zero over this many steps.
    pub warmup_steps: usize,
    pub schedule: LrSchedule,
    /// Global gradient-norm clip; zero disables clipping.
    pub clip_norm: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Evaluate on the training scenes every this many steps (zero: never).
    pub eval_every: usize,
    /// Stop once overall mAP_3D reaches this value at an evaluation step
    /// (zero: never stop early).
    pub target_map_3d: f64,
    pub log_every: usize,
    /// Minimum pixel area of an image-plane target for camera pretraining.
    pub min_box_area_2d: f64,
    /// Learning-rate multiplier of the branches loaded from pretraining
    /// checkpoints; zero keeps them frozen.
    pub pretrained_lr_scale: f64,
    /// Also start the detection head from the lidar checkpoint's head; the
    /// fused and lidar widths must then agree.
    pub pretrained_head: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            warmup_steps: 0,
            schedule: LrSchedule::Constant,
            clip_norm: 0.0,
            batch_size: 4,
            steps: 10_000,
            eval_every: 0,
            target_map_3d: 0.0,
            log_every: 100,
            min_box_area_2d: 1.0,
            pretrained_lr_scale: 1.0,
            pretrained_head: false,
        }
    }
}

/// Everything a run needs, serialised as one TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataSpec,
    pub eval: EvalThresholds,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            data: DataSpec::default(),
            eval: EvalThresholds::default(),
        }
    }
}

impl TrainConfig {
    /// Learning rate of the 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
                let t = (step - self.warmup_steps) as f64 / span;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
            }
        }
    }
}

impl RunConfig {
    /// Reduced model on 20 toy scenes, tuned to overfit within 2000 CPU
    /// steps: no augmentation, no dropout, warmed-up cosine lr peaking at
    /// 5e-4 and a 0.5 IoU threshold for both classes. Fine-tuning from
    /// pretrained branches reuses the lidar head and trains the branches at
    /// a tenth of the rate.
    pub fn toy() -> Self {
        let model = ModelConfig::toy();
        Self {
            seed: 0,
            model,
            loss: LossConfig::default(),
            train: TrainConfig {
                lr: 5e-4,
                warmup_steps: 200,
                schedule: LrSchedule::Cosine,
                clip_norm: 10.0,
                batch_size: 4,
                steps: 2000,
                eval_every: 100,
                target_map_3d: 0.8,
                log_every: 100,
                min_box_area_2d: 1.0,
                pretrained_lr_scale: 0.1,
                pretrained_head: true,
            },
            data: DataSpec {
                source: DataSource::Synthetic {
                    count: 20,
                    seed: 0,
                    synth: SynthConfig::toy(),
                },
                subsample: 1.0,
                augment: false,
                augmentation: AugmentConfig::default(),
            },
            eval: EvalThresholds::uniform(0.5),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.eval.validate()?;
        self.data.augmentation.validate()?;
        let t = &self.train;
        if !(t.lr > 0.0) || !(t.clip_norm >= 0.0) || t.batch_size == 0 || !(t.pretrained_lr_scale >= 0.0) {
            return Err(Error::Config("lr and batch size must be positive, clip non-negative".into()));
        }
        if !(self.data.subsample > 0.0 && self.data.subsample <= 1.0) {
            return Err(Error::Config(format!("subsample fraction {} outside (0, 1]", self.data.subsample)));
        }
        if self.eval.class_names.len() != self.model.head.num_classes {
            return Err(Error::Config("evaluation classes do not match the head".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// Materialises the dataset, then applies the subsample fraction.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let full = match &self.data.source {
            DataSource::Synthetic { count, seed, synth } => Dataset::synthetic(synth, *count, *seed)?,
            DataSource::Kitti { root } => load_kitti_dir(root, &self.model.lidar.voxel.range)?,
        };
        if full.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(if self.data.subsample < 1.0 {
            full.subsample(self.data.subsample, self.seed)
        } else {
            full
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_is_exact() {
        for cfg in [RunConfig::default(), RunConfig::toy()] {
            let text = cfg.to_toml().unwrap();
            assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        }
        let kitti = RunConfig {
            data: DataSpec {
                source: DataSource::Kitti { root: "/tmp/x".into() },
                ..DataSpec::default()
            },
            ..RunConfig::toy()
        };
        assert_eq!(RunConfig::from_toml(&kitti.to_toml().unwrap()).unwrap(), kitti);
    }

    #[test]
    fn defaults_follow_the_reference_training_setup() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(cfg.model.camera.encoder.dropout, 0.3);
        assert_eq!(cfg.model.fusion.encoder.dropout, 0.3);
        assert_eq!(cfg.eval.iou, vec![0.7, 0.5]);
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_files_take_defaults() {
        let cfg = RunConfig::from_toml("seed = 7\n[train]\nsteps = 5\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.steps, 5);
        assert_eq!(cfg.train.lr, 1e-4);
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let t = TrainConfig {
            lr: 1.0,
            warmup_steps: 4,
            schedule: LrSchedule::Cosine,
            steps: 14,
            ..TrainConfig::default()
        };
        assert_eq!(t.lr_at(0), 0.25);
        assert_eq!(t.lr_at(3), 1.0);
        assert_eq!(t.lr_at(4), 1.0);
        assert!((t.lr_at(9) - 0.5).abs() < 1e-12);
        assert!(t.lr_at(13) < t.lr_at(12));
        let c = TrainConfig { schedule: LrSchedule::Constant, ..t };
        assert_eq!(c.lr_at(13), 1.0);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nlr = -1.0\n").is_err());
        assert!(RunConfig::from_toml("[data]\nsubsample = 0.0\n").is_err());
    }
}
