//! Oriented 3D boxes: residual encoding, rotated IoU, anchors, matching and NMS.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::kitti::ObjectClass;

/// Oriented box: center, extents (`l` along the heading, `w` across it, `h`
/// vertical) and heading about +z.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box7 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(theta: f64) -> f64 {
    let mut a = theta - 2.0 * PI * ((theta + PI) / (2.0 * PI)).floor();
    if a <= -PI {
        a += 2.0 * PI;
    }
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

impl Box7 {
    pub fn new(x: f64, y: f64, z: f64, l: f64, w: f64, h: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            z,
            l,
            w,
            h,
            theta: normalize_angle(theta),
        }
    }

    pub fn to_array(&self) -> [f64; 7] {
        [self.x, self.y, self.z, self.l, self.w, self.h, self.theta]
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite()) && self.l > 0.0 && self.w > 0.0 && self.h > 0.0
    }

    /// Footprint corners in counter-clockwise order.
    pub fn corners_bev(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.theta.sin_cos();
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(dx, dy)| [self.x + c * dx - s * dy, self.y + s * dx + c * dy])
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    pub fn bottom(&self) -> f64 {
        self.z - self.h / 2.0
    }

    pub fn top(&self) -> f64 {
        self.z + self.h / 2.0
    }

    /// Whether `(px, py, pz)` lies inside the box (boundary inclusive).
    pub fn contains(&self, px: f64, py: f64, pz: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (px - self.x, py - self.y);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= self.l / 2.0 && v.abs() <= self.w / 2.0 && (pz - self.z).abs() <= self.h / 2.0
    }

    /// Radius of the footprint's circumscribed circle.
    pub fn bev_radius(&self) -> f64 {
        0.5 * (self.l * self.l + self.w * self.w).sqrt()
    }
}

/// Normalized offsets between a box and an anchor, in the order
/// `dx, dy, dz, dw, dl, dh, dtheta`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Residual7 {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub dw: f64,
    pub dl: f64,
    pub dh: f64,
    pub dtheta: f64,
}

impl Residual7 {
    pub fn to_array(&self) -> [f64; 7] {
        [self.dx, self.dy, self.dz, self.dw, self.dl, self.dh, self.dtheta]
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        Self {
            dx: a[0],
            dy: a[1],
            dz: a[2],
            dw: a[3],
            dl: a[4],
            dh: a[5],
            dtheta: a[6],
        }
    }
}

/// Diagonal of the anchor footprint, `sqrt(w^2 + l^2)`.
pub fn anchor_diagonal(anchor: &Box7) -> f64 {
    (anchor.w * anchor.w + anchor.l * anchor.l).sqrt()
}

pub fn encode(gt: &Box7, anchor: &Box7) -> Residual7 {
    let d = anchor_diagonal(anchor);
    Residual7 {
        dx: (gt.x - anchor.x) / d,
        dy: (gt.y - anchor.y) / d,
        dz: (gt.z - anchor.z) / anchor.h,
        dw: (gt.w / anchor.w).ln(),
        dl: (gt.l / anchor.l).ln(),
        dh: (gt.h / anchor.h).ln(),
        dtheta: (gt.theta - anchor.theta).sin(),
    }
}

static THETA_CLAMPS: AtomicU64 = AtomicU64::new(0);

/// How many decodes had to clamp `|dtheta| > 1` since process start.
pub fn theta_clamp_count() -> u64 {
    THETA_CLAMPS.load(Ordering::Relaxed)
}

/// Inverse of [`encode`]. The heading comes back through `asin`, so boxes
/// more than a quarter turn from their anchor decode to the mirrored heading.
pub fn decode(res: &Residual7, anchor: &Box7) -> Box7 {
    let d = anchor_diagonal(anchor);
    let mut dtheta = res.dtheta;
    if dtheta.abs() > 1.0 {
        THETA_CLAMPS.fetch_add(1, Ordering::Relaxed);
        dtheta = dtheta.clamp(-1.0, 1.0);
    }
    Box7::new(
        anchor.x + res.dx * d,
        anchor.y + res.dy * d,
        anchor.z + res.dz * anchor.h,
        anchor.l * res.dl.exp(),
        anchor.w * res.dw.exp(),
        anchor.h * res.dh.exp(),
        anchor.theta + dtheta.asin(),
    )
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Shoelace area of a simple polygon (positive for counter-clockwise order).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        s += a[0] * b[1] - b[0] * a[1];
    }
    0.5 * s
}

/// Clips `subject` against the convex counter-clockwise polygon `clip`
/// (Sutherland-Hodgman).
pub fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let (e0, e1) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(e0, e1, cur) >= 0.0;
            let prev_in = cross(e0, e1, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(line_intersection(prev, cur, e0, e1));
                }
                output.push(cur);
            } else if prev_in {
                output.push(line_intersection(prev, cur, e0, e1));
            }
        }
    }
    output
}

fn line_intersection(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let cp = cross(a, b, p);
    let cq = cross(a, b, q);
    let denom = cp - cq;
    if denom.abs() < 1e-300 {
        return q;
    }
    let t = cp / denom;
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Footprint intersection area of two boxes.
pub fn bev_intersection(a: &Box7, b: &Box7) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let r = a.bev_radius() + b.bev_radius();
    if dx * dx + dy * dy > r * r {
        return 0.0;
    }
    polygon_area(&clip_polygon(&a.corners_bev(), &b.corners_bev())).max(0.0)
}

/// Rotated bird's-eye-view IoU.
pub fn iou_bev(a: &Box7, b: &Box7) -> f64 {
    if !(a.l > 0.0 && a.w > 0.0 && b.l > 0.0 && b.w > 0.0) {
        return 0.0;
    }
    let (aa, ab) = (a.l * a.w, b.l * b.w);
    let inter = bev_intersection(a, b);
    let union = aa + ab - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Rotated 3D IoU: footprint intersection times vertical overlap over the
/// union of volumes.
pub fn iou_3d(a: &Box7, b: &Box7) -> f64 {
    if !(a.is_valid() && b.is_valid()) {
        return 0.0;
    }
    let (va, vb) = (a.volume(), b.volume());
    let overlap_h = (a.top().min(b.top()) - a.bottom().max(b.bottom())).max(0.0);
    if overlap_h == 0.0 {
        return 0.0;
    }
    let inter = bev_intersection(a, b) * overlap_h;
    let union = va + vb - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouKind {
    #[default]
    Bev,
    #[serde(rename = "3d")]
    ThreeD,
}

pub fn iou(kind: IouKind, a: &Box7, b: &Box7) -> f64 {
    match kind {
        IouKind::Bev => iou_bev(a, b),
        IouKind::ThreeD => iou_3d(a, b),
    }
}

/// Greedy non-maximum suppression. Boxes are visited by descending score,
/// ties by lower index; a box is dropped when its IoU with any kept box
/// exceeds `iou_thresh`. Returns kept indices in visit order.
pub fn nms(boxes: &[Box7], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    nms_with(boxes, scores, iou_thresh, IouKind::Bev)
}

pub fn nms_with(boxes: &[Box7], scores: &[f64], iou_thresh: f64, kind: IouKind) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms: boxes and scores must align");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(kind, &boxes[i], &boxes[k]) <= iou_thresh) {
            kept.push(i);
        }
    }
    kept
}

/// Per-class anchor prior.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AnchorSpec {
    pub class: ObjectClass,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub z: f64,
    pub headings: Vec<f64>,
}

impl AnchorSpec {
    pub fn car() -> Self {
        Self {
            class: ObjectClass::Car,
            l: 3.9,
            w: 1.6,
            h: 1.56,
            z: -1.0,
            headings: vec![0.0, PI / 2.0],
        }
    }

    pub fn pedestrian() -> Self {
        Self {
            class: ObjectClass::Pedestrian,
            l: 0.8,
            w: 0.6,
            h: 1.73,
            z: -0.6,
            headings: vec![0.0, PI / 2.0],
        }
    }

    pub fn cyclist() -> Self {
        Self {
            class: ObjectClass::Cyclist,
            l: 1.76,
            w: 0.6,
            h: 1.73,
            z: -0.6,
            headings: vec![0.0, PI / 2.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub bbox: Box7,
    pub class: ObjectClass,
}

/// Anchors for every cell of a `rows x cols` map, flattened cell-major then
/// by (class, heading).
#[derive(Clone, Debug)]
pub struct AnchorGrid {
    pub rows: usize,
    pub cols: usize,
    pub per_cell: usize,
    pub anchors: Vec<Anchor>,
}

impl AnchorGrid {
    /// `origin` is the `(x, y)` of the map corner and `cell` the cell size in
    /// meters; rows run along y and columns along x.
    pub fn new(specs: &[AnchorSpec], rows: usize, cols: usize, origin: (f64, f64), cell: f64) -> Self {
        let per_cell: usize = specs.iter().map(|s| s.headings.len()).sum();
        let mut anchors = Vec::with_capacity(rows * cols * per_cell);
        for r in 0..rows {
            for c in 0..cols {
                let x = origin.0 + (c as f64 + 0.5) * cell;
                let y = origin.1 + (r as f64 + 0.5) * cell;
                for s in specs {
                    for &heading in &s.headings {
                        anchors.push(Anchor {
                            bbox: Box7::new(x, y, s.z, s.l, s.w, s.h, heading),
                            class: s.class,
                        });
                    }
                }
            }
        }
        Self {
            rows,
            cols,
            per_cell,
            anchors,
        }
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Flat index of the anchor at `(row, col, slot)`.
    pub fn index(&self, row: usize, col: usize, slot: usize) -> usize {
        (row * self.cols + col) * self.per_cell + slot
    }

    /// `(row, col, slot)` of a flat anchor index.
    pub fn position(&self, index: usize) -> (usize, usize, usize) {
        let cell = index / self.per_cell;
        (cell / self.cols, cell % self.cols, index % self.per_cell)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Assignment {
    Positive(usize),
    Negative,
    Ignore,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchThresholds {
    pub positive: f64,
    pub negative: f64,
}

impl MatchThresholds {
    pub fn for_class(class: ObjectClass) -> Self {
        match class {
            ObjectClass::Car => Self {
                positive: 0.6,
                negative: 0.45,
            },
            _ => Self {
                positive: 0.5,
                negative: 0.35,
            },
        }
    }
}

/// Assigns each anchor to a ground truth of its own class.
///
/// An anchor is positive when its best IoU reaches the positive threshold,
/// negative when it stays below the negative threshold for every box, and
/// ignored otherwise. Each ground truth additionally claims its own
/// highest-IoU anchor. `DontCare` boxes never produce positives; anchors
/// overlapping them beyond the negative threshold are ignored.
pub fn match_anchors(
    anchors: &[Anchor],
    gts: &[(Box7, ObjectClass)],
    thresholds: impl Fn(ObjectClass) -> MatchThresholds,
) -> Vec<Assignment> {
    let mut out = vec![Assignment::Negative; anchors.len()];
    // best (iou, anchor) per gt
    let mut best: Vec<(f64, Option<usize>)> = vec![(0.0, None); gts.len()];
    for (ai, anchor) in anchors.iter().enumerate() {
        let th = thresholds(anchor.class);
        let mut max_iou = 0.0;
        let mut arg = None;
        let mut dont_care = 0.0f64;
        for (gi, (gt, class)) in gts.iter().enumerate() {
            if *class == ObjectClass::DontCare {
                if !gt.is_valid() {
                    continue;
                }
                dont_care = dont_care.max(iou_bev(&anchor.bbox, gt));
                continue;
            }
            if *class != anchor.class {
                continue;
            }
            let v = iou_bev(&anchor.bbox, gt);
            if v > max_iou {
                max_iou = v;
                arg = Some(gi);
            }
            if v > best[gi].0 {
                best[gi] = (v, Some(ai));
            }
        }
        out[ai] = match arg {
            Some(gi) if max_iou >= th.positive => Assignment::Positive(gi),
            _ if max_iou >= th.negative || dont_care >= th.negative => Assignment::Ignore,
            _ => Assignment::Negative,
        };
    }
    for (gi, (_, anchor)) in best.iter().enumerate() {
        if let Some(ai) = anchor {
            out[*ai] = Assignment::Positive(gi);
        }
    }
    out
}
