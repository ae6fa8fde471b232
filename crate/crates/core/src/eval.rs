//! Average precision over scored detections.

use crate::boxes::{iou_3d, Box7};
use crate::detector::{Detector, PostProcess};
use crate::error::Result;
use crate::kitti::{Detection, Difficulty, LabeledBox, ObjectClass, Scene};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolation {
    /// Recall levels 0, 0.1, ..., 1.
    Eleven,
    /// Recall levels 1/40, ..., 1.
    Forty,
}

impl Interpolation {
    pub fn from_points(points: usize) -> Option<Self> {
        match points {
            11 => Some(Self::Eleven),
            40 => Some(Self::Forty),
            _ => None,
        }
    }

    fn levels(self) -> Vec<f64> {
        match self {
            Self::Eleven => (0..=10).map(|i| i as f64 / 10.0).collect(),
            Self::Forty => (1..=40).map(|i| i as f64 / 40.0).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalQuery {
    pub class: ObjectClass,
    pub iou_threshold: f64,
    /// Keep ground truths at or below this difficulty; `None` keeps all.
    pub difficulty: Option<Difficulty>,
    pub interpolation: Interpolation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApResult {
    /// In `[0, 100]`.
    pub ap: f64,
    /// `(recall, precision)` after each ranked detection.
    pub curve: Vec<(f64, f64)>,
    pub n_gt: usize,
}

fn difficulty_rank(d: Difficulty) -> Option<u8> {
    match d {
        Difficulty::Easy => Some(0),
        Difficulty::Moderate => Some(1),
        Difficulty::Hard => Some(2),
        Difficulty::Unknown => None,
    }
}

/// AP of `query.class` over scenes. `detections[s]` and `gts[s]` belong to
/// scene `s`. Returns `None` when no ground truth qualifies.
///
/// Detections are matched greedily in descending score order against the
/// unmatched ground truth of highest 3D IoU. Detections that only overlap
/// ignored ground truths (wrong difficulty, `DontCare`) are discarded.
pub fn evaluate_ap(detections: &[Vec<Detection>], gts: &[Vec<LabeledBox>], query: &EvalQuery) -> Option<ApResult> {
    let mut ranked: Vec<(f64, usize, Box7)> = Vec::new();
    for (s, dets) in detections.iter().enumerate() {
        ranked.extend(dets.iter().filter(|d| d.class == query.class).map(|d| (d.score, s, d.bbox)));
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    // (box, counted) per scene
    let kept: Vec<Vec<(Box7, bool)>> = gts
        .iter()
        .map(|labels| {
            labels
                .iter()
                .filter_map(|l| {
                    if l.class == query.class {
                        let counted = match query.difficulty {
                            None => true,
                            Some(max) => match (difficulty_rank(l.difficulty), difficulty_rank(max)) {
                                (Some(a), Some(b)) => a <= b,
                                _ => false,
                            },
                        };
                        Some((l.bbox, counted))
                    } else if l.class == ObjectClass::DontCare && l.bbox.is_valid() {
                        Some((l.bbox, false))
                    } else {
                        None
                    }
                })
                .collect()
        })
        .collect();
    let n_gt: usize = kept.iter().flatten().filter(|(_, c)| *c).count();
    if n_gt == 0 {
        return None;
    }

    let mut used: Vec<Vec<bool>> = kept.iter().map(|v| vec![false; v.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(ranked.len());
    for (_, s, bbox) in ranked {
        let Some(scene) = kept.get(s) else {
            fp += 1;
            curve.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
            continue;
        };
        let mut best: Option<(f64, usize)> = None;
        for (gi, (gt, _)) in scene.iter().enumerate() {
            if used[s][gi] {
                continue;
            }
            let v = iou_3d(&bbox, gt);
            if v >= query.iou_threshold && best.is_none_or(|(bv, _)| v > bv) {
                best = Some((v, gi));
            }
        }
        match best {
            Some((_, gi)) if scene[gi].1 => {
                used[s][gi] = true;
                tp += 1;
            }
            Some((_, gi)) => {
                used[s][gi] = true;
                continue;
            }
            None => fp += 1,
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    Some(ApResult {
        ap: interpolated_ap(&curve, query.interpolation),
        curve,
        n_gt,
    })
}

/// Runs the detector over `scenes` and scores the detections.
pub fn evaluate_detector(
    detector: &Detector,
    store: &ParamStore,
    scenes: &[Scene],
    post: &PostProcess,
    query: &EvalQuery,
) -> Result<(Option<ApResult>, Vec<Vec<Detection>>)> {
    let detections = scenes
        .iter()
        .map(|s| detector.detect(store, &s.points, post))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<Vec<LabeledBox>> = scenes.iter().map(|s| s.labels.clone()).collect();
    Ok((evaluate_ap(&detections, &gts, query), detections))
}

/// Mean over recall levels of the best precision at recall >= level, x100.
pub fn interpolated_ap(curve: &[(f64, f64)], interpolation: Interpolation) -> f64 {
    let levels = interpolation.levels();
    let sum: f64 = levels
        .iter()
        .map(|&r| {
            curve
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum();
    100.0 * sum / levels.len() as f64
}
