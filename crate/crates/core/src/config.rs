//! TOML run configuration shared by every command.
//!
//! Unknown keys are a hard error at every level. Each run resolves its
//! configuration (defaults applied, overrides folded in) and writes the
//! result next to its outputs, so any artifact can be reproduced from the
//! file sitting beside it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::synthdata::{default_classes, ActionClass, DatasetConfig, LidarConfig, PlatformSpec};
use crate::trainer::TrainConfig;
use crate::{Error, Real, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for data generation and sweep/ablation cells.
    pub workers: usize,
    pub dataset: DatasetSection,
    pub layers: LayersSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 1,
            dataset: DatasetSection::default(),
            layers: LayersSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Directory holding (or receiving) clips and the manifest.
    pub root: PathBuf,
    /// Composite class names, `<base>+<gesture>`.
    pub classes: Vec<String>,
    pub clips_per_class: usize,
    pub subjects: u32,
    pub train_subjects: u32,
    pub duration_frames: usize,
    pub points_per_frame: usize,
    pub distance_min: f64,
    pub distance_max: f64,
    pub platform_velocity_max: f64,
    pub height_jitter_std: f64,
    pub pitch_jitter_deg: f64,
    pub sensor_height: f64,
    pub range_noise_std: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let d = DatasetConfig::default();
        DatasetSection {
            root: PathBuf::from("data"),
            classes: d.classes.iter().map(|c| c.name()).collect(),
            clips_per_class: d.clips_per_class,
            subjects: d.subjects,
            train_subjects: d.train_subjects,
            duration_frames: d.duration_frames,
            points_per_frame: d.points_per_frame,
            distance_min: d.distance_range.0 as f64,
            distance_max: d.distance_range.1 as f64,
            platform_velocity_max: d.platform_velocity_max as f64,
            height_jitter_std: d.platform.height_jitter_std as f64,
            pitch_jitter_deg: (d.platform.pitch_jitter_std as f64).to_degrees(),
            sensor_height: d.lidar.sensor_height as f64,
            range_noise_std: d.lidar.range_noise_std as f64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayersSection {
    pub radii: [f64; 3],
    pub candidate_k: usize,
    pub temporal_stride: usize,
}

impl Default for LayersSection {
    fn default() -> Self {
        LayersSection { radii: [0.2, 0.4, 0.8], candidate_k: 32, temporal_stride: 2 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub widths: [usize; 3],
    pub depth: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub k_max: usize,
    pub temporal_radius: usize,
    pub layered: bool,
    pub mns: bool,
    pub eeq: bool,
    pub omega_init: [f64; 3],
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            widths: m.widths,
            depth: m.depth,
            heads: m.heads,
            ff_mult: m.ff_mult,
            k_max: m.k_max,
            temporal_radius: m.temporal_radius,
            layered: m.layered,
            mns: m.mns,
            eeq: m.eeq,
            omega_init: [1.0, 1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub clip_frames: usize,
    pub points_per_frame: usize,
    /// Early-stop threshold on test accuracy, if set.
    pub target_accuracy: Option<f64>,
    pub eval_every: usize,
    pub omega_lr_scale: f64,
    pub final_eval_window: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            base_lr: t.base_lr as f64,
            lr_milestones: t.lr_milestones,
            lr_decay: t.lr_decay as f64,
            momentum: t.momentum as f64,
            batch_size: t.batch_size,
            clip_frames: t.clip_frames,
            points_per_frame: t.points_per_frame,
            target_accuracy: None,
            eval_every: t.eval_every,
            omega_lr_scale: t.omega_lr_scale as f64,
            final_eval_window: t.final_eval_window,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Directory receiving reports, checkpoints, logs and resolved configs.
    pub out_dir: PathBuf,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { out_dir: PathBuf::from("runs") }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset_config()?.validate()?;
        self.model_config()?.validate()?;
        if self.train.clip_frames == 0 || self.train.points_per_frame == 0 {
            return Err(Error::Config("train: clip_frames and points_per_frame must be positive".into()));
        }
        if self.train.points_per_frame > self.dataset.points_per_frame {
            return Err(Error::Config(format!(
                "train: points_per_frame {} exceeds the dataset budget {}",
                self.train.points_per_frame, self.dataset.points_per_frame
            )));
        }
        Ok(())
    }

    /// Serialize the resolved configuration (for the reproducibility drop).
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn classes(&self) -> Result<Vec<ActionClass>> {
        if self.dataset.classes.is_empty() {
            return Ok(default_classes());
        }
        self.dataset.classes.iter().map(|name| ActionClass::parse(name)).collect()
    }

    pub fn dataset_config(&self) -> Result<DatasetConfig> {
        let d = &self.dataset;
        Ok(DatasetConfig {
            classes: self.classes()?,
            clips_per_class: d.clips_per_class,
            subjects: d.subjects,
            train_subjects: d.train_subjects,
            duration_frames: d.duration_frames,
            points_per_frame: d.points_per_frame,
            distance_range: (d.distance_min as Real, d.distance_max as Real),
            lidar: LidarConfig {
                sensor_height: d.sensor_height as Real,
                range_noise_std: d.range_noise_std as Real,
                ..LidarConfig::default()
            },
            platform: PlatformSpec {
                height_jitter_std: d.height_jitter_std as Real,
                pitch_jitter_std: (d.pitch_jitter_deg.to_radians()) as Real,
                forward_velocity: 0.0,
            },
            platform_velocity_max: d.platform_velocity_max as Real,
            seed: self.seed,
        })
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let classes = self.classes()?;
        Ok(ModelConfig {
            num_classes: classes.len(),
            widths: m.widths,
            depth: m.depth,
            heads: m.heads,
            ff_mult: m.ff_mult,
            k_max: m.k_max,
            temporal_radius: m.temporal_radius,
            radii: self.layers.radii.map(|r| r as Real),
            candidate_k: self.layers.candidate_k,
            temporal_stride: self.layers.temporal_stride,
            layered: m.layered,
            mns: m.mns,
            eeq: m.eeq,
            omega_init: m.omega_init.map(|v| v as Real),
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            base_lr: t.base_lr as Real,
            lr_milestones: t.lr_milestones.clone(),
            lr_decay: t.lr_decay as Real,
            momentum: t.momentum as Real,
            batch_size: t.batch_size,
            clip_frames: t.clip_frames,
            points_per_frame: t.points_per_frame,
            seed: self.seed,
            target_accuracy: t.target_accuracy.map(|v| v as Real),
            eval_every: t.eval_every,
            omega_lr_scale: t.omega_lr_scale as Real,
            final_eval_window: t.final_eval_window,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        let parsed: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(parsed.to_toml(), text);
        parsed.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("verbosity = 3\n").unwrap_err().to_string();
        assert!(err.contains("verbosity"), "{err}");

        let err = toml::from_str::<RunConfig>("[model]\nwdiths = [8, 8, 8]\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("wdiths"), "{err}");
    }

    #[test]
    fn invalid_class_name_is_named_in_the_error() {
        let mut cfg = RunConfig::default();
        cfg.dataset.classes = vec!["sprint+wave".into()];
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("sprint"), "{err}");
    }

    #[test]
    fn partial_files_fill_from_defaults() {
        let cfg: RunConfig = toml::from_str("seed = 9\n[train]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, TrainSection::default().batch_size);
    }

    #[test]
    fn train_budget_cannot_exceed_dataset_budget() {
        let mut cfg = RunConfig::default();
        cfg.train.points_per_frame = cfg.dataset.points_per_frame + 1;
        assert!(cfg.validate().is_err());
    }
}
