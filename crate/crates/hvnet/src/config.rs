//! Model configuration: JSON-backed, strictly validated, with the two
//! built-in profiles (full-scale reference geometry and a desk-scale
//! trainable setup).

use crate::backbone::BackboneConfig;
use crate::error::{HvError, Result};
use crate::head::{ClassSpec, LossConfig};
use crate::pointcloud::{AugmentConfig, ObjectTemplate, SceneSpec, SynthSpec};
use crate::voxel::VoxelGridSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};
use std::path::Path;

/// Optimizer settings. Decay milestones are nominal epoch numbers against
/// `reference_epochs`; a run with a different epoch budget scales them
/// proportionally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_iterations: usize,
    pub warmup_ratio: f64,
    pub decay_factor: f64,
    pub decay_epochs: Vec<usize>,
    pub reference_epochs: usize,
}

/// Synthetic scene budget for toy training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub scenes: usize,
    pub boxes_per_class: usize,
    pub points_per_box: usize,
    pub clutter_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub scene: SceneSpec,
    /// Base voxel cell (x, y) in meters at scale 1.
    pub base_voxel: [f64; 2],
    pub feature_scales: Vec<f64>,
    pub projection_scales: Vec<f64>,
    pub point_dim: usize,
    pub encoder_width: usize,
    pub projection_channels: usize,
    pub backbone: BackboneConfig,
    pub classes: Vec<ClassSpec>,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub score_threshold: f64,
    pub augment: AugmentConfig,
    pub synth: SynthConfig,
}

impl ModelConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ModelConfig = serde_json::from_str(&text)
            .map_err(|e| HvError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        SceneSpec::new(self.scene.min, self.scene.max)?;
        if self.base_voxel[0] <= 0.0 || self.base_voxel[1] <= 0.0 {
            return Err(HvError::Config("base voxel must be positive".into()));
        }
        if (self.base_voxel[0] - self.base_voxel[1]).abs() > 1e-12 {
            return Err(HvError::Config(
                "anchor generation assumes square pixels; base voxel x must equal y".into(),
            ));
        }
        if self.feature_scales.is_empty() || self.projection_scales.is_empty() {
            return Err(HvError::Config("scale sets must be non-empty".into()));
        }
        for set in [&self.feature_scales, &self.projection_scales] {
            if set.windows(2).any(|w| w[0] >= w[1]) {
                return Err(HvError::Config("scales must ascend strictly".into()));
            }
            if set.iter().any(|&s| s <= 0.0) {
                return Err(HvError::Config("scales must be positive".into()));
            }
        }
        // The main stream halves resolution per block, so each projection
        // scale must double the previous one.
        for w in self.projection_scales.windows(2) {
            if (w[1] / w[0] - 2.0).abs() > 1e-9 {
                return Err(HvError::Config(format!(
                    "projection scales must double: {} then {}",
                    w[0], w[1]
                )));
            }
        }
        // Every grid must exist (>= 1 cell per axis).
        self.feature_grids()?;
        self.projection_grids()?;
        if self.point_dim < 3 {
            return Err(HvError::Config("point_dim must be at least 3".into()));
        }
        if self.encoder_width == 0 || self.projection_channels == 0 {
            return Err(HvError::Config("feature widths must be positive".into()));
        }
        self.backbone.validate()?;
        if self.projection_scales.len() > self.backbone.num_blocks() {
            return Err(HvError::Config(format!(
                "{} projection scales exceed {} backbone blocks",
                self.projection_scales.len(),
                self.backbone.num_blocks()
            )));
        }
        if self.classes.is_empty() {
            return Err(HvError::Config("at least one class is required".into()));
        }
        if self.classes.len() != self.backbone.class_strides.len() {
            return Err(HvError::Config(format!(
                "{} classes vs {} class strides",
                self.classes.len(),
                self.backbone.class_strides.len()
            )));
        }
        for c in &self.classes {
            c.validate()?;
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(HvError::Config("score threshold must be in [0, 1]".into()));
        }
        if self.optimizer.reference_epochs == 0 {
            return Err(HvError::Config("reference_epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn feature_grids(&self) -> Result<Vec<VoxelGridSpec>> {
        self.feature_scales
            .iter()
            .map(|&s| VoxelGridSpec::new(self.scene, self.base_voxel[0], self.base_voxel[1], s))
            .collect()
    }

    pub fn projection_grids(&self) -> Result<Vec<VoxelGridSpec>> {
        self.projection_scales
            .iter()
            .map(|&s| VoxelGridSpec::new(self.scene, self.base_voxel[0], self.base_voxel[1], s))
            .collect()
    }

    /// Canonical fingerprint binding weight archives to a configuration.
    pub fn fingerprint(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Synthetic scene recipe derived from the class list (first anchor
    /// size of each class is the template cuboid).
    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            scene: self.scene,
            templates: self
                .classes
                .iter()
                .map(|c| ObjectTemplate {
                    class: c.name.clone(),
                    size: c.sizes[0],
                    z_center: c.z_center,
                })
                .collect(),
            boxes_per_class: self.synth.boxes_per_class,
            points_per_box: self.synth.points_per_box,
            clutter_points: self.synth.clutter_points,
        }
    }

    fn reference_classes() -> Vec<ClassSpec> {
        let orientations = vec![0.0, FRAC_PI_4, FRAC_PI_2, 3.0 * FRAC_PI_4];
        vec![
            ClassSpec {
                name: "Pedestrian".into(),
                sizes: vec![[0.8, 0.8, 1.7]],
                orientations: orientations.clone(),
                z_center: -1.0,
                pos_iou: 0.35,
                neg_iou: 0.25,
                nms_iou: 0.02,
                eval_iou: 0.5,
                focal_alpha: 0.75,
            },
            ClassSpec {
                name: "Cyclist".into(),
                sizes: vec![[0.8, 1.8, 1.5]],
                orientations: orientations.clone(),
                z_center: -1.0,
                pos_iou: 0.35,
                neg_iou: 0.25,
                nms_iou: 0.02,
                eval_iou: 0.5,
                focal_alpha: 0.75,
            },
            ClassSpec {
                name: "Car".into(),
                sizes: vec![[1.7, 3.5, 1.56], [2.0, 6.0, 1.56]],
                orientations,
                z_center: -1.0,
                pos_iou: 0.5,
                neg_iou: 0.35,
                nms_iou: 0.4,
                eval_iou: 0.7,
                focal_alpha: 0.25,
            },
        ]
    }

    /// Reference geometry: 64 x 64 m scene at 0.2 m cells (320 x 320 base
    /// grid), encoder width 64, 128 projection channels.
    pub fn full_scale() -> Self {
        ModelConfig {
            scene: SceneSpec {
                min: [0.0, -32.0, -3.0],
                max: [64.0, 32.0, 2.0],
            },
            base_voxel: [0.2, 0.2],
            feature_scales: vec![0.5, 1.0, 2.0],
            projection_scales: vec![1.0, 2.0, 4.0],
            point_dim: 4,
            encoder_width: 64,
            projection_channels: 128,
            backbone: BackboneConfig {
                block_channels: vec![64, 128, 256],
                convs_per_block: 3,
                ffpn_channels: 64,
                head_channels: 64,
                class_strides: vec![1, 2, 2],
            },
            classes: Self::reference_classes(),
            loss: LossConfig {
                gamma: 2.0,
                lambda_loc: 1.0,
                lambda_cls: 1.0,
                lambda_vertical: 1.5,
            },
            optimizer: OptimizerConfig {
                learning_rate: 2e-4,
                weight_decay: 1e-4,
                warmup_iterations: 300,
                warmup_ratio: 1.0 / 3.0,
                decay_factor: 0.1,
                decay_epochs: vec![40, 60],
                reference_epochs: 70,
            },
            score_threshold: 0.2,
            augment: AugmentConfig::default(),
            synth: SynthConfig {
                scenes: 3,
                boxes_per_class: 1,
                points_per_box: 120,
                clutter_points: 60,
            },
        }
    }

    /// Desk-scale profile: 12.8 x 12.8 m scene at 0.4 m cells (32 x 32 base
    /// grid), width-8 encoder, (8, 16, 32) backbone. Small enough to train
    /// on synthetic scenes in minutes.
    pub fn desk() -> Self {
        let mut cfg = Self::full_scale();
        cfg.scene = SceneSpec {
            min: [0.0, -6.4, -3.0],
            max: [12.8, 6.4, 2.0],
        };
        cfg.base_voxel = [0.4, 0.4];
        cfg.encoder_width = 8;
        cfg.projection_channels = 16;
        cfg.backbone.block_channels = vec![8, 16, 32];
        cfg.backbone.convs_per_block = 2;
        cfg.backbone.ffpn_channels = 16;
        cfg.backbone.head_channels = 16;
        cfg.optimizer.learning_rate = 2e-3;
        cfg.optimizer.warmup_iterations = 50;
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_profiles_validate() {
        ModelConfig::full_scale().validate().unwrap();
        ModelConfig::desk().validate().unwrap();
    }

    #[test]
    fn json_round_trip_preserves_config() {
        let cfg = ModelConfig::desk();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ModelConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.fingerprint(), back.fingerprint());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let cfg = ModelConfig::desk();
        let mut value: serde_json::Value =
            serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        value
            .as_object_mut()
            .unwrap()
            .insert("unexpected".into(), serde_json::json!(1));
        let res: std::result::Result<ModelConfig, _> = serde_json::from_str(&value.to_string());
        assert!(res.is_err());
    }

    #[test]
    fn non_doubling_projection_scales_rejected() {
        let mut cfg = ModelConfig::desk();
        cfg.projection_scales = vec![1.0, 3.0];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = ModelConfig::desk();
        let mut b = a.clone();
        b.encoder_width = 16;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn reference_grid_is_320() {
        let cfg = ModelConfig::full_scale();
        let grids = cfg.projection_grids().unwrap();
        assert_eq!((grids[0].num_x(), grids[0].num_y()), (320, 320));
        assert_eq!((grids[1].num_x(), grids[1].num_y()), (160, 160));
        assert_eq!((grids[2].num_x(), grids[2].num_y()), (80, 80));
    }
}
