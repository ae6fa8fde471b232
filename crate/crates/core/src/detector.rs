//! End-to-end detector: voxelization, voxel-graph features, SDR head,
//! anchor targets and post-processing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::boxes::{decode, encode, match_anchors, nms_with, AnchorGrid, AnchorSpec, Assignment, IouKind, MatchThresholds};
use crate::error::{Error, Result};
use crate::geometry::{build_voxels, VoxelConfig};
use crate::kitti::{Detection, ObjectClass, Point, Scene};
use crate::layers::Mode;
use crate::loss::{classification_loss, regression_loss, total_loss, LossWeights, SceneLoss};
use crate::params::ParamStore;
use crate::sdr::{SdrConfig, SdrHead};
use crate::voxelnet::{BevConfig, VoxelGraphNet, VoxelNetConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub voxels: VoxelConfig,
    pub net: VoxelNetConfig,
    pub bev: BevConfig,
    pub sdr: SdrConfig,
    pub anchors: Vec<AnchorSpec>,
    pub thresholds: Vec<(ObjectClass, MatchThresholds)>,
    pub loss: LossWeights,
}

impl DetectorConfig {
    pub fn thresholds_for(&self, class: ObjectClass) -> MatchThresholds {
        self.thresholds
            .iter()
            .find(|(c, _)| *c == class)
            .map_or_else(|| MatchThresholds::for_class(class), |(_, t)| *t)
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchors.iter().map(|a| a.headings.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.bev.validate()?;
        self.sdr.validate()?;
        self.sdr.check_extent(self.bev.height(), self.bev.width())?;
        if self.sdr.in_channels != self.net.bev_channels {
            return Err(Error::Config(format!(
                "head expects {} input channels, network produces {}",
                self.sdr.in_channels, self.net.bev_channels
            )));
        }
        if self.sdr.anchors_per_cell != self.anchors_per_cell() {
            return Err(Error::Config(format!(
                "head predicts {} anchors per cell, anchor set has {}",
                self.sdr.anchors_per_cell,
                self.anchors_per_cell()
            )));
        }
        if self.voxels.n_voxels <= self.net.k && self.net.gate != crate::voxelnet::GateMode::Off {
            return Err(Error::Config(format!(
                "{} voxels cannot support a {}-NN graph",
                self.voxels.n_voxels, self.net.k
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub config: DetectorConfig,
    pub net: VoxelGraphNet,
    pub head: SdrHead,
    pub anchors: AnchorGrid,
}

/// Per-anchor head outputs of one scene in anchor order.
#[derive(Clone, Copy, Debug)]
pub struct SceneOutput {
    /// `[P, A]`, flat index = anchor index.
    pub cls: Var,
    /// `[P, 7A]`, flat index = `anchor * 7 + component`.
    pub reg: Var,
    pub dropped_voxels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PostProcess {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub nms_kind: IouKind,
    pub max_detections: usize,
}

impl Default for PostProcess {
    fn default() -> Self {
        Self {
            score_threshold: 0.1,
            nms_iou: 0.7,
            nms_kind: IouKind::Bev,
            max_detections: 100,
        }
    }
}

impl Detector {
    pub fn new(store: &mut ParamStore, config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = VoxelGraphNet::new(store, "vg", config.net.clone(), &mut rng)?;
        let head = SdrHead::new(store, "sdr", config.sdr.clone(), &mut rng)?;
        let anchors = AnchorGrid::new(
            &config.anchors,
            config.bev.height() / 2,
            config.bev.width() / 2,
            (config.bev.x_min, config.bev.y_min),
            2.0 * config.bev.resolution,
        );
        Ok(Self {
            config,
            net,
            head,
            anchors,
        })
    }

    pub fn trainable_count(&self, store: &ParamStore) -> usize {
        self.net.trainable_count(store) + self.head.trainable_count(store)
    }

    /// Points inside the BEV footprint.
    pub fn crop(&self, points: &[Point]) -> Vec<Point> {
        let b = &self.config.bev;
        points
            .iter()
            .filter(|p| p.x >= b.x_min && p.x < b.x_max && p.y >= b.y_min && p.y < b.y_max)
            .copied()
            .collect()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, points: &[Point], mode: Mode) -> Result<SceneOutput> {
        let points = self.crop(points);
        let xyz: Vec<[f64; 3]> = points.iter().map(Point::xyz).collect();
        let voxels = build_voxels(&xyz, &self.config.voxels)?;
        let vg = self.net.forward(g, store, &points, &voxels, &self.config.bev)?;
        let out = self.head.forward(g, store, vg.bev, mode)?;
        let flat = |g: &mut Graph, v: Var| -> Result<Var> {
            let s = g.shape(v).to_vec();
            let r = g.reshape(v, vec![s[0], s[1] * s[2]])?;
            g.transpose(r)
        };
        Ok(SceneOutput {
            cls: flat(g, out.cls)?,
            reg: flat(g, out.reg)?,
            dropped_voxels: vg.dropped,
        })
    }

    /// Anchor assignments for a scene's labels.
    pub fn assign(&self, scene: &Scene) -> Vec<Assignment> {
        let gts: Vec<_> = scene.labels.iter().map(|l| (l.bbox, l.class)).collect();
        match_anchors(&self.anchors.anchors, &gts, |c| self.config.thresholds_for(c))
    }

    /// Forward plus the taped loss of one scene.
    pub fn scene_loss(&self, g: &mut Graph, store: &ParamStore, scene: &Scene, mode: Mode) -> Result<SceneLoss> {
        let out = self.forward(g, store, &scene.points, mode)?;
        let assignments = self.assign(scene);
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        let mut reg_idx = Vec::new();
        let mut targets = Vec::new();
        for (ai, a) in assignments.iter().enumerate() {
            match *a {
                Assignment::Positive(gi) => {
                    pos.push(ai);
                    let r = encode(&scene.labels[gi].bbox, &self.anchors.anchors[ai].bbox);
                    targets.extend(r.to_array());
                    reg_idx.extend((0..7).map(|c| ai * 7 + c));
                }
                Assignment::Negative => neg.push(ai),
                Assignment::Ignore => {}
            }
        }
        let w = &self.config.loss;
        let pos_logits = g.gather(out.cls, &pos)?;
        let neg_logits = g.gather(out.cls, &neg)?;
        let cls = classification_loss(g, pos_logits, neg_logits, w)?;
        let pred = g.gather(out.reg, &reg_idx)?;
        let reg = regression_loss(g, pred, &targets, pos.len())?;
        let total = total_loss(g, cls, reg, w)?;
        Ok(SceneLoss {
            cls,
            reg,
            total,
            n_pos: pos.len(),
            n_neg: neg.len(),
        })
    }

    /// Decoded, suppressed detections for a point cloud.
    pub fn detect(&self, store: &ParamStore, points: &[Point], post: &PostProcess) -> Result<Vec<Detection>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, points, Mode::Eval)?;
        Ok(self.postprocess(g.value(out.cls).data(), g.value(out.reg).data(), post))
    }

    pub fn postprocess(&self, logits: &[f64], reg: &[f64], post: &PostProcess) -> Vec<Detection> {
        let mut by_class: Vec<(ObjectClass, Vec<Detection>)> = Vec::new();
        for (ai, &z) in logits.iter().enumerate() {
            let score = 1.0 / (1.0 + (-z).exp());
            if score < post.score_threshold {
                continue;
            }
            let anchor = &self.anchors.anchors[ai];
            let mut r = [0.0; 7];
            r.copy_from_slice(&reg[ai * 7..ai * 7 + 7]);
            let bbox = decode(&crate::boxes::Residual7::from_array(r), &anchor.bbox);
            if !bbox.is_valid() {
                continue;
            }
            let det = Detection {
                bbox,
                class: anchor.class,
                score,
            };
            match by_class.iter_mut().find(|(c, _)| *c == anchor.class) {
                Some((_, v)) => v.push(det),
                None => by_class.push((anchor.class, vec![det])),
            }
        }
        let mut kept = Vec::new();
        for (_, dets) in by_class {
            let boxes: Vec<_> = dets.iter().map(|d| d.bbox).collect();
            let scores: Vec<_> = dets.iter().map(|d| d.score).collect();
            kept.extend(nms_with(&boxes, &scores, post.nms_iou, post.nms_kind).into_iter().map(|i| dets[i]));
        }
        kept.sort_by(|a, b| b.score.total_cmp(&a.score));
        kept.truncate(post.max_detections);
        kept
    }
}
