//! Flat key-value run configuration (TOML) and presets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxes::{AnchorSpec, IouKind, MatchThresholds};
use crate::detector::{DetectorConfig, PostProcess};
use crate::error::{Error, Result};
use crate::geometry::VoxelConfig;
use crate::kitti::{ObjectClass, Scene};
use crate::loss::LossWeights;
use crate::sdr::{SdrConfig, SdrVariant};
use crate::synthetic::{generate_synthetic, SyntheticConfig};
use crate::voxelnet::{BevConfig, GateMode, InputCoords, VoxelNetConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ClassSet {
    Car,
    Pedcyc,
}

impl ClassSet {
    pub fn anchors(self) -> Vec<AnchorSpec> {
        match self {
            ClassSet::Car => vec![AnchorSpec::car()],
            ClassSet::Pedcyc => vec![AnchorSpec::pedestrian(), AnchorSpec::cyclist()],
        }
    }

    pub fn classes(self) -> Vec<ObjectClass> {
        self.anchors().into_iter().map(|a| a.class).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    Synthetic,
    Kitti,
}

/// Every tunable of a run. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub classes: ClassSet,
    pub dataset: Dataset,

    pub n_voxels: usize,
    pub radius: f64,
    pub point_cap: usize,
    pub fps_seed_index: usize,

    pub point_mlp: Vec<usize>,
    pub center_mlp: Vec<usize>,
    pub attention_mlp: Vec<(usize, usize)>,
    pub knn_k: usize,
    pub gate: GateMode,
    pub input_coords: InputCoords,
    pub centroid_scale: f64,
    pub bev_channels: usize,

    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub resolution: f64,

    pub block_channels: [usize; 3],
    pub convs_per_block: usize,
    pub branch_channels: usize,
    pub branch_convs: usize,
    pub merged_channels: usize,
    pub head_variant: SdrVariant,

    pub car_pos_iou: f64,
    pub car_neg_iou: f64,
    pub small_pos_iou: f64,
    pub small_neg_iou: f64,

    pub nms_iou: f64,
    pub nms_kind: IouKind,
    pub score_threshold: f64,
    pub max_detections: usize,

    pub alpha: f64,
    pub beta: f64,
    pub gamma_pos: f64,
    pub gamma_neg: f64,

    pub learning_rate: f64,
    pub decay_start_epoch: usize,
    pub decay_every: usize,
    pub decay_count: usize,
    pub epochs: usize,
    /// Caps the number of optimizer steps when set.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: bool,
    pub threads: usize,
    /// Re-estimate BatchNorm statistics over the training scenes after fitting.
    pub recalibrate_bn: bool,

    pub synthetic_scenes: usize,
    pub synthetic_boxes: usize,
    pub synthetic_points_per_box: usize,
    pub synthetic_clutter: usize,
    pub synthetic_ground: usize,
    pub synthetic_noise: f64,

    pub eval_iou: f64,
    pub ap_points: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::car()
    }
}

impl TrainConfig {
    /// Full-size car network.
    pub fn car() -> Self {
        Self {
            classes: ClassSet::Car,
            dataset: Dataset::Kitti,
            n_voxels: 1024,
            radius: 1.8,
            point_cap: 64,
            fps_seed_index: 0,
            point_mlp: vec![64, 128, 128],
            center_mlp: vec![64, 128, 128],
            attention_mlp: vec![(128, 128), (128, 256), (512, 1024)],
            knn_k: 3,
            gate: GateMode::PerVoxel,
            input_coords: InputCoords::Relative,
            centroid_scale: 0.1,
            bev_channels: 64,
            x_min: 0.0,
            x_max: 70.4,
            y_min: -40.0,
            y_max: 40.0,
            resolution: 0.4,
            block_channels: [64, 128, 256],
            convs_per_block: 4,
            branch_channels: 128,
            branch_convs: 2,
            merged_channels: 128,
            head_variant: SdrVariant::Sdr,
            car_pos_iou: 0.6,
            car_neg_iou: 0.45,
            small_pos_iou: 0.5,
            small_neg_iou: 0.35,
            nms_iou: 0.7,
            nms_kind: IouKind::Bev,
            score_threshold: 0.1,
            max_detections: 100,
            alpha: 1.0,
            beta: 2.0,
            gamma_pos: 1.5,
            gamma_neg: 1.0,
            learning_rate: 1e-3,
            decay_start_epoch: 140,
            decay_every: 20,
            decay_count: 3,
            epochs: 200,
            max_steps: None,
            batch_size: 2,
            seed: 0,
            augment: true,
            threads: 1,
            recalibrate_bn: true,
            synthetic_scenes: 20,
            synthetic_boxes: 3,
            synthetic_points_per_box: 160,
            synthetic_clutter: 300,
            synthetic_ground: 600,
            synthetic_noise: 0.02,
            eval_iou: 0.7,
            ap_points: 11,
        }
    }

    /// Full-size pedestrian and cyclist network.
    pub fn pedcyc() -> Self {
        Self {
            classes: ClassSet::Pedcyc,
            n_voxels: 512,
            radius: 0.8,
            x_min: 0.0,
            x_max: 48.0,
            y_min: -20.0,
            y_max: 20.0,
            resolution: 0.2,
            nms_iou: 0.6,
            eval_iou: 0.5,
            ..Self::car()
        }
    }

    /// Laptop-sized synthetic car run.
    pub fn desk() -> Self {
        Self {
            dataset: Dataset::Synthetic,
            n_voxels: 256,
            radius: 1.0,
            point_cap: 32,
            point_mlp: vec![16, 32, 32],
            center_mlp: vec![16, 32, 32],
            attention_mlp: vec![(32, 32), (32, 64), (64, 64)],
            bev_channels: 16,
            x_min: 0.0,
            x_max: 16.0,
            y_min: -8.0,
            y_max: 8.0,
            resolution: 0.2,
            block_channels: [16, 32, 64],
            convs_per_block: 2,
            branch_channels: 32,
            branch_convs: 1,
            merged_channels: 32,
            nms_iou: 0.5,
            learning_rate: 3e-3,
            epochs: 20,
            max_steps: Some(200),
            augment: false,
            eval_iou: 0.5,
            ..Self::car()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "car" => Ok(Self::car()),
            "pedcyc" => Ok(Self::pedcyc()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.decay_every == 0 {
            return Err(Error::Config("decay_every must be positive".into()));
        }
        if !matches!(self.ap_points, 11 | 40) {
            return Err(Error::Config(format!("ap_points must be 11 or 40, got {}", self.ap_points)));
        }
        for (name, pos, neg) in [
            ("car", self.car_pos_iou, self.car_neg_iou),
            ("small", self.small_pos_iou, self.small_neg_iou),
        ] {
            if !(0.0 <= neg && neg < pos && pos <= 1.0) {
                return Err(Error::Config(format!("{name} IoU thresholds need 0 <= neg < pos <= 1")));
            }
        }
        self.detector()?.validate()
    }

    pub fn detector(&self) -> Result<DetectorConfig> {
        let anchors = self.classes.anchors();
        let per_cell = anchors.iter().map(|a| a.headings.len()).sum();
        let small = MatchThresholds {
            positive: self.small_pos_iou,
            negative: self.small_neg_iou,
        };
        Ok(DetectorConfig {
            voxels: VoxelConfig {
                n_voxels: self.n_voxels,
                radius: self.radius,
                point_cap: self.point_cap,
                seed_index: self.fps_seed_index,
            },
            net: VoxelNetConfig {
                point_mlp: self.point_mlp.clone(),
                center_mlp: self.center_mlp.clone(),
                attention: self.attention_mlp.clone(),
                k: self.knn_k,
                bev_channels: self.bev_channels,
                gate: self.gate,
                coords: self.input_coords,
                centroid_scale: self.centroid_scale,
            },
            bev: BevConfig {
                x_min: self.x_min,
                x_max: self.x_max,
                y_min: self.y_min,
                y_max: self.y_max,
                resolution: self.resolution,
            },
            sdr: SdrConfig {
                in_channels: self.bev_channels,
                block_channels: self.block_channels,
                convs_per_block: self.convs_per_block,
                branch_channels: self.branch_channels,
                branch_convs: self.branch_convs,
                merged_channels: self.merged_channels,
                anchors_per_cell: per_cell,
                variant: self.head_variant,
            },
            anchors,
            thresholds: vec![
                (
                    ObjectClass::Car,
                    MatchThresholds {
                        positive: self.car_pos_iou,
                        negative: self.car_neg_iou,
                    },
                ),
                (ObjectClass::Pedestrian, small),
                (ObjectClass::Cyclist, small),
            ],
            loss: LossWeights {
                alpha: self.alpha,
                beta: self.beta,
                gamma_pos: self.gamma_pos,
                gamma_neg: self.gamma_neg,
            },
        })
    }

    pub fn postprocess(&self) -> PostProcess {
        PostProcess {
            score_threshold: self.score_threshold,
            nms_iou: self.nms_iou,
            nms_kind: self.nms_kind,
            max_detections: self.max_detections,
        }
    }

    /// The configured number of synthetic scenes; scene `i` uses seed
    /// `seed * 1000 + i`.
    pub fn synthetic_dataset(&self) -> Result<Vec<Scene>> {
        let synth = self.synthetic();
        (0..self.synthetic_scenes as u64)
            .map(|i| generate_synthetic(&synth, self.seed.wrapping_mul(1000).wrapping_add(i)))
            .collect()
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        let object = self.classes.anchors().remove(0);
        SyntheticConfig {
            n_boxes: self.synthetic_boxes,
            points_per_box: self.synthetic_points_per_box,
            n_clutter: self.synthetic_clutter,
            n_ground: self.synthetic_ground,
            extent: (self.x_min, self.x_max, self.y_min, self.y_max),
            ground_z: object.z - object.h / 2.0,
            noise_sigma: self.synthetic_noise,
            object,
            ..SyntheticConfig::default()
        }
    }
}
