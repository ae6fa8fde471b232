//! One check per acceptance criterion. `Ok` and `Err` both carry a summary
//! line; `Err` means the criterion is not met.

use std::f64::consts::{FRAC_PI_2, PI};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use voxgraph::boxes::{decode, encode, iou_bev, nms, normalize_angle, Box7};
use voxgraph::config::TrainConfig;
use voxgraph::detector::Detector;
use voxgraph::eval::{evaluate_detector, EvalQuery, Interpolation};
use voxgraph::geometry::{ball_query, build_knn_graph, build_voxels, farthest_point_sample};
use voxgraph::kitti::{
    encode_velodyne, format_detections, format_labels, parse_labels, parse_velodyne, Calibration, Detection,
    Difficulty, ImageFields, LabeledBox, ObjectClass, Point,
};
use voxgraph::layers::Mode;
use voxgraph::loss::{classification_loss, regression_loss, total_loss, LossWeights};
use voxgraph::sdr::SdrVariant;
use voxgraph::synthetic::generate_synthetic;
use voxgraph::train::{lr_schedule, Trainer};
use voxgraph::voxelnet::{local_attention_scores, GateMode, NEIGHBOR_EPS};
use voxgraph::{Graph, ParamStore, Tensor};

use super::*;

pub type Outcome = std::result::Result<String, String>;

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// ---- 1 -------------------------------------------------------------------

pub fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    for seed in 0..3 {
        for case in op_cases(seed) {
            let e = gradcheck(&case.inputs, 1e-6, 1e-6, &case.build);
            if e >= worst.0 {
                worst = (e, case.name);
            }
        }
    }
    let config = micro_config();
    let mut store = ParamStore::new();
    let detector = Detector::new(&mut store, config.detector().map_err(fail)?, 3).map_err(fail)?;
    jitter_store(&mut store, 5, 0.05);
    let scene = generate_synthetic(&config.synthetic(), 11).map_err(fail)?;
    if bev_nonzero(&detector, &store, &scene.points) == 0 {
        return Err("micro model produced an empty BEV grid".into());
    }
    let model = param_gradcheck(&store, 1e-6, 1e-5, |g: &mut Graph, s: &ParamStore| {
        Ok(detector.scene_loss(g, s, &scene, Mode::Train)?.total)
    });
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst.0 <= 1e-4 && model <= 1e-3 && secs < 120.0,
        format!(
            "worst op {} at {:.1e}, micro model {:.1e} over {} parameters, {secs:.1}s",
            worst.1,
            worst.0,
            model,
            store.trainable_count()
        ),
    )
}

// ---- 2 -------------------------------------------------------------------

pub fn attention_normalization() -> Outcome {
    let mut r = rng(2);
    let mut local = 0.0f64;
    for _ in 0..100 {
        let t = r.random_range(2..=32);
        let d = r.random_range(1..=16);
        let f = random_tensor(&mut r, &[t, d], 2.0);
        let a = local_attention_scores(&f).map_err(fail)?;
        for j in 0..t {
            if a.at2(j, j) != 0.0 {
                return Err(format!("self weight {} in a {t}-point voxel", a.at2(j, j)));
            }
            local = local.max((a.row(j).iter().sum::<f64>() - 1.0).abs());
        }
    }
    let (mut global, mut checked, mut guarded) = (0.0f64, 0, 0);
    for _ in 0..100 {
        let n = r.random_range(6..=48);
        let k = r.random_range(1..=5);
        let d = r.random_range(1..=8);
        let centroids: Vec<[f64; 3]> = (0..n)
            .map(|_| [r.random_range(0.0..40.0), r.random_range(-20.0..20.0), r.random_range(-2.0..1.0)])
            .collect();
        let graph = build_knn_graph(&centroids, k).map_err(fail)?;
        // non-negative, as after the ReLU that feeds the gate; one row zeroed to hit the guard
        let mut f: Vec<f64> = (0..n * d).map(|_| r.random_range(0.0..1.0)).collect();
        f[..d].iter_mut().for_each(|v| *v = 0.0);
        let w = voxgraph::autograd::neighbor_weights(&Tensor::new(vec![n, d], f).map_err(fail)?, &graph.neighbors, NEIGHBOR_EPS);
        for (i, ws) in w.weights.iter().enumerate() {
            if w.fallback[i] {
                guarded += 1;
            } else {
                checked += 1;
                global = global.max((ws.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    verdict(
        local <= 1e-9 && global <= 1e-9 && checked > 0,
        format!("local max |sum-1| {local:.1e}, global {global:.1e} over {checked} nodes ({guarded} guarded)"),
    )
}

// ---- 3 -------------------------------------------------------------------

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

pub fn permutation_invariance() -> Outcome {
    let config = TrainConfig::desk();
    let mut store = ParamStore::new();
    let detector = Detector::new(&mut store, config.detector().map_err(fail)?, 1).map_err(fail)?;
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let scene = generate_synthetic(&config.synthetic(), 500 + seed).map_err(fail)?;
        let points = detector.crop(&scene.points);
        let xyz: Vec<[f64; 3]> = points.iter().map(Point::xyz).collect();
        let voxels = build_voxels(&xyz, &detector.config.voxels).map_err(fail)?;
        let bev = |points: &[Point], voxels: &[voxgraph::geometry::SphericalVoxel]| -> std::result::Result<Vec<f64>, String> {
            let mut g = Graph::new();
            let out = detector
                .net
                .forward(&mut g, &store, points, voxels, &detector.config.bev)
                .map_err(fail)?;
            Ok(g.value(out.bev).data().to_vec())
        };
        let base = bev(&points, &voxels)?;
        if base.iter().all(|v| *v == 0.0) {
            return Err("empty BEV grid".into());
        }

        // rows within each voxel and the voxel list itself
        let mut shuffled = voxels.clone();
        for v in &mut shuffled {
            v.member_indices.shuffle(&mut r);
        }
        shuffled.shuffle(&mut r);
        worst = worst.max(max_rel(&base, &bev(&points, &shuffled)?));

        // the whole cloud, with voxel indices remapped
        let mut perm: Vec<usize> = (0..points.len()).collect();
        perm.shuffle(&mut r);
        let mut position = vec![0; points.len()];
        for (new, &old) in perm.iter().enumerate() {
            position[old] = new;
        }
        let moved: Vec<Point> = perm.iter().map(|&i| points[i]).collect();
        let remapped: Vec<_> = shuffled
            .iter()
            .map(|v| voxgraph::geometry::SphericalVoxel {
                center_point_index: position[v.center_point_index],
                member_indices: v.member_indices.iter().map(|&i| position[i]).collect(),
                centroid: v.centroid,
            })
            .collect();
        worst = worst.max(max_rel(&base, &bev(&moved, &remapped)?));
    }
    verdict(worst <= 1e-9, format!("max relative BEV change {worst:.1e} over 5 scenes"))
}

// ---- 4 -------------------------------------------------------------------

fn d2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2])
}

/// Recomputes every min-distance from scratch at each step.
pub fn fps_reference(points: &[[f64; 3]], n: usize, seed: usize) -> Vec<usize> {
    let mut picked = vec![seed];
    while picked.len() < n {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..points.len() {
            if picked.contains(&i) {
                continue;
            }
            let d = picked.iter().map(|&s| d2(&points[i], &points[s])).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        picked.push(best.unwrap().0);
    }
    picked
}

pub fn ball_reference(points: &[[f64; 3]], center: usize, r: f64) -> Vec<usize> {
    (0..points.len()).filter(|&i| d2(&points[i], &points[center]) < r * r).collect()
}

pub fn knn_reference(points: &[[f64; 3]], k: usize) -> Vec<Vec<usize>> {
    (0..points.len())
        .map(|i| {
            let mut all: Vec<(f64, usize)> = (0..points.len())
                .filter(|&j| j != i)
                .map(|j| (d2(&points[i], &points[j]), j))
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            all.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

/// Uniform clouds, plus integer lattices every third instance so that
/// distance ties and points exactly on the ball boundary occur.
pub fn random_cloud(r: &mut impl Rng, instance: usize) -> Vec<[f64; 3]> {
    let n = r.random_range(2..=512);
    if instance % 3 == 0 {
        (0..n)
            .map(|_| [r.random_range(0..8) as f64, r.random_range(0..8) as f64, r.random_range(0..3) as f64])
            .collect()
    } else {
        (0..n)
            .map(|_| [r.random_range(0.0..20.0), r.random_range(-10.0..10.0), r.random_range(-2.0..1.0)])
            .collect()
    }
}

pub fn geometry_oracles(instances: usize) -> Outcome {
    let mut r = rng(4);
    let mut mismatches = Vec::new();
    for inst in 0..instances {
        let points = random_cloud(&mut r, inst);
        let n = points.len();
        let m = r.random_range(1..=n.min(64));
        let seed = r.random_range(0..n);
        if farthest_point_sample(&points, m, seed).map_err(fail)? != fps_reference(&points, m, seed) {
            mismatches.push(format!("fps #{inst}"));
        }
        let center = r.random_range(0..n);
        let radius = if inst % 3 == 0 { r.random_range(1..4) as f64 } else { r.random_range(0.2..4.0) };
        if ball_query(&points, center, radius).map_err(fail)? != ball_reference(&points, center, radius) {
            mismatches.push(format!("ball #{inst}"));
        }
        let k = r.random_range(1..=5.min(n - 1));
        if build_knn_graph(&points, k).map_err(fail)?.neighbors != knn_reference(&points, k) {
            mismatches.push(format!("knn #{inst}"));
        }
    }
    verdict(
        mismatches.is_empty(),
        format!("{instances} instances each of FPS, ball query and KNN; mismatches: {mismatches:?}"),
    )
}

// ---- 5 -------------------------------------------------------------------

pub fn random_box(r: &mut impl Rng) -> Box7 {
    Box7::new(
        r.random_range(-40.0..40.0),
        r.random_range(-40.0..40.0),
        r.random_range(-3.0..1.0),
        r.random_range(0.3..6.0),
        r.random_range(0.3..3.0),
        r.random_range(0.5..3.0),
        r.random_range(-PI..PI),
    )
}

fn angle_gap(a: f64, b: f64) -> f64 {
    normalize_angle(a - b).abs()
}

/// Whether `(px, py)` lies in the footprint, by rotating into the box frame.
fn in_footprint(b: &Box7, px: f64, py: f64) -> bool {
    let (s, c) = b.theta.sin_cos();
    let (dx, dy) = (px - b.x, py - b.y);
    let u = c * dx + s * dy;
    let v = -s * dx + c * dy;
    u.abs() <= b.l / 2.0 && v.abs() <= b.w / 2.0
}

pub fn monte_carlo_iou(a: &Box7, b: &Box7, samples: usize, r: &mut impl Rng) -> f64 {
    let corners: Vec<[f64; 2]> = a.corners_bev().into_iter().chain(b.corners_bev()).collect();
    let (x0, x1) = corners.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| (lo.min(c[0]), hi.max(c[0])));
    let (y0, y1) = corners.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| (lo.min(c[1]), hi.max(c[1])));
    let (mut both, mut either) = (0u64, 0u64);
    for _ in 0..samples {
        let px = r.random_range(x0..x1);
        let py = r.random_range(y0..y1);
        let (ia, ib) = (in_footprint(a, px, py), in_footprint(b, px, py));
        both += (ia && ib) as u64;
        either += (ia || ib) as u64;
    }
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}

/// Keeps the best unsuppressed box, suppresses every later box above the
/// threshold, and repeats; all IoUs precomputed.
pub fn nms_reference(boxes: &[Box7], scores: &[f64], thresh: f64) -> Vec<usize> {
    let n = boxes.len();
    let ious: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| iou_bev(&boxes[i], &boxes[j])).collect()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut suppressed = vec![false; n];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if ious[i][j] > thresh {
                suppressed[j] = true;
            }
        }
    }
    keep
}

pub fn box_codec(pairs: usize, iou_pairs: usize, samples: usize, nms_sets: usize) -> Outcome {
    let mut r = rng(5);
    let mut codec = 0.0f64;
    for _ in 0..pairs {
        let anchor = random_box(&mut r);
        let mut gt = random_box(&mut r);
        gt.theta = normalize_angle(anchor.theta + r.random_range(-FRAC_PI_2..FRAC_PI_2));
        let back = decode(&encode(&gt, &anchor), &anchor);
        let a = gt.to_array();
        let b = back.to_array();
        for c in 0..6 {
            codec = codec.max((a[c] - b[c]).abs());
        }
        codec = codec.max(angle_gap(gt.theta, back.theta));
    }

    let mut iou_err = 0.0f64;
    for i in 0..iou_pairs {
        let a = random_box(&mut r);
        let mut b = random_box(&mut r);
        if i % 5 != 0 {
            b.x = a.x + r.random_range(-2.0..2.0);
            b.y = a.y + r.random_range(-2.0..2.0);
        }
        iou_err = iou_err.max((iou_bev(&a, &b) - monte_carlo_iou(&a, &b, samples, &mut r)).abs());
    }

    let mut nms_bad = 0;
    for set in 0..nms_sets {
        let n = r.random_range(0..40);
        let boxes: Vec<Box7> = (0..n)
            .map(|_| {
                let mut b = random_box(&mut r);
                b.x = r.random_range(0.0..10.0);
                b.y = r.random_range(0.0..10.0);
                b
            })
            .collect();
        // coarse scores on every other set to force ties
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                let s: f64 = r.random_range(0.0..1.0);
                if set % 2 == 0 {
                    (s * 5.0).round() / 5.0
                } else {
                    s
                }
            })
            .collect();
        let thresh = r.random_range(0.05..0.8);
        if nms(&boxes, &scores, thresh) != nms_reference(&boxes, &scores, thresh) {
            nms_bad += 1;
        }
    }
    verdict(
        codec <= 1e-9 && iou_err <= 0.01 && nms_bad == 0,
        format!(
            "round trip max error {codec:.1e} on {pairs} pairs, IoU vs Monte Carlo {iou_err:.4} on {iou_pairs} pairs, \
             NMS mismatches {nms_bad}/{nms_sets}"
        ),
    )
}

// ---- 6 -------------------------------------------------------------------

/// `-log sigmoid(z)` and `-log(1 - sigmoid(z))` written out directly.
fn bce_oracle(z: f64, positive: bool) -> f64 {
    let m = if positive { -z } else { z };
    // log(1 + e^m) without overflow
    if m > 0.0 {
        m + (1.0 + (-m).exp()).ln()
    } else {
        (1.0 + m.exp()).ln()
    }
}

fn smooth_l1_oracle(e: f64) -> f64 {
    if e.abs() < 1.0 {
        0.5 * e * e
    } else {
        e.abs() - 0.5
    }
}

pub fn loss_correctness(trials: usize) -> Outcome {
    let mut r = rng(6);
    let mut worst = 0.0f64;
    let mut zero_pos = 0;
    for trial in 0..trials {
        let n_pos = if trial % 4 == 0 { 0 } else { r.random_range(1..6) };
        let n_neg = r.random_range(0..60);
        let w = if trial % 2 == 0 {
            LossWeights::default()
        } else {
            LossWeights {
                alpha: r.random_range(0.1..3.0),
                beta: r.random_range(0.1..3.0),
                gamma_pos: r.random_range(0.1..3.0),
                gamma_neg: r.random_range(0.1..3.0),
            }
        };
        let pos: Vec<f64> = (0..n_pos).map(|_| r.random_range(-8.0..8.0)).collect();
        let neg: Vec<f64> = (0..n_neg).map(|_| r.random_range(-8.0..8.0)).collect();
        let pred: Vec<f64> = (0..7 * n_pos).map(|_| r.random_range(-3.0..3.0)).collect();
        let target: Vec<f64> = (0..7 * n_pos).map(|_| r.random_range(-3.0..3.0)).collect();

        let mut g = Graph::new();
        let vp = g.constant(Tensor::new(vec![n_pos], pos.clone()).unwrap());
        let vn = g.constant(Tensor::new(vec![n_neg], neg.clone()).unwrap());
        let vr = g.constant(Tensor::new(vec![7 * n_pos], pred.clone()).unwrap());
        let cls = classification_loss(&mut g, vp, vn, &w).map_err(fail)?;
        let reg = regression_loss(&mut g, vr, &target, n_pos).map_err(fail)?;
        let total = total_loss(&mut g, cls, reg, &w).map_err(fail)?;
        let value = |v| g.value(v).data()[0];

        let mean = |v: &[f64], positive: bool| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().map(|&z| bce_oracle(z, positive)).sum::<f64>() / v.len() as f64
            }
        };
        let want_cls = w.gamma_pos * mean(&pos, true) + w.gamma_neg * mean(&neg, false);
        let sum: f64 = pred.iter().zip(&target).map(|(p, t)| smooth_l1_oracle(p - t)).sum();
        let want_reg = if n_pos == 0 { 0.0 } else { sum / n_pos as f64 };
        let want_total = w.alpha * want_cls + w.beta * want_reg;
        if n_pos == 0 {
            zero_pos += 1;
            if value(reg) != 0.0 {
                return Err(format!("regression term {} without positives", value(reg)));
            }
        }
        for (got, want) in [(value(cls), want_cls), (value(reg), want_reg), (value(total), want_total)] {
            worst = worst.max((got - want).abs() / want.abs().max(1.0));
        }
    }
    let schedule: Vec<f64> = [0, 139, 140, 160, 180].iter().map(|&e| lr_schedule(e)).collect();
    let want = [1e-3, 1e-3, 1e-4, 1e-5, 1e-6];
    let sched_ok = schedule.iter().zip(want).all(|(a, b)| (a - b).abs() <= 1e-12 * b);
    verdict(
        worst <= 1e-12 && sched_ok,
        format!("max deviation {worst:.1e} over {trials} draws ({zero_pos} without positives), schedule {schedule:?}"),
    )
}

// ---- 7 -------------------------------------------------------------------

pub fn desk_learning() -> Outcome {
    let start = Instant::now();
    let config = TrainConfig::desk();
    let scenes = config.synthetic_dataset().map_err(fail)?;
    let mut trainer = Trainer::new(config.clone()).map_err(fail)?;
    let history = trainer.fit(&scenes, None).map_err(fail)?;
    let first = history.first().ok_or("no steps")?.loss.total;
    let last = history.last().unwrap().loss.total;
    let query = EvalQuery {
        class: ObjectClass::Car,
        iou_threshold: 0.5,
        difficulty: None,
        interpolation: Interpolation::Eleven,
    };
    let (ap, _) = evaluate_detector(&trainer.detector, &trainer.store, &scenes, &config.postprocess(), &query).map_err(fail)?;
    let ap = ap.map_or(0.0, |a| a.ap);
    let ratio = last / first;
    let secs = start.elapsed().as_secs_f64();
    verdict(
        history.len() == 200 && ratio <= 0.2 && ap >= 90.0 && secs <= 600.0,
        format!(
            "{} steps on {} scenes: loss {first:.3} -> {last:.3} ({:.1}%), AP@0.5 {ap:.2}, {secs:.0}s on {} thread(s)",
            history.len(),
            scenes.len(),
            100.0 * ratio,
            config.threads
        ),
    )
}

// ---- 8 -------------------------------------------------------------------

fn linear(i: usize, o: usize) -> usize {
    i * o + o
}

fn conv(i: usize, o: usize, k: usize) -> usize {
    i * o * k * k + o
}

/// Closed-form trainable count of the detector a config describes.
pub fn closed_form_params(c: &TrainConfig) -> usize {
    let mut n = 0;
    let mut fin = 4;
    for &s in &c.point_mlp {
        n += linear(fin, s);
        fin = s;
    }
    let gated = c.gate != GateMode::Off;
    if gated {
        let mut fin = 3;
        for &s in &c.center_mlp {
            n += linear(fin, s);
            fin = s;
        }
    }
    let layers = c.attention_mlp.len();
    let mut d = *c.point_mlp.last().unwrap();
    for (m, &(h, o)) in c.attention_mlp.iter().enumerate() {
        n += linear(d, h) + linear(h, o);
        if gated {
            n += linear(d, 1);
            if m + 1 < layers {
                n += linear(d, h) + linear(h, o);
            }
        }
        d = o;
    }
    n += linear(d, c.bev_channels);

    let bn = |ch: usize| 2 * ch;
    let [c1, c2, c3] = c.block_channels;
    let mut cin = c.bev_channels;
    for ch in [c1, c2, c3] {
        n += conv(cin, ch, 3) + bn(ch) + (c.convs_per_block - 1) * (conv(ch, ch, 3) + bn(ch));
        cin = ch;
    }
    let b = c.branch_channels;
    let branch_in = match c.head_variant {
        SdrVariant::Sr => [c1, c2, c3],
        _ => [c1 + c2, c2 + c3, c3],
    };
    for ci in branch_in {
        n += conv(ci, b, 3) + bn(b) + (c.branch_convs - 1) * (conv(b, b, 3) + bn(b));
    }
    if c.head_variant != SdrVariant::Dr {
        n += conv(c1, b, 1) + conv(c2, b, 1) + conv(c3, b, 1);
    }
    n += conv(3 * b, c.merged_channels, 3) + bn(c.merged_channels);
    let a: usize = c.classes.anchors().iter().map(|s| s.headings.len()).sum();
    n + conv(c.merged_channels, a, 1) + conv(c.merged_channels, 7 * a, 1)
}

/// Builds, runs forward and backward, and returns the registered count.
fn exercise(config: &TrainConfig) -> std::result::Result<usize, String> {
    let mut store = ParamStore::new();
    let detector = Detector::new(&mut store, config.detector().map_err(fail)?, 7).map_err(fail)?;
    let scene = generate_synthetic(&config.synthetic(), 21).map_err(fail)?;
    let mut g = Graph::new();
    let loss = detector.scene_loss(&mut g, &store, &scene, Mode::Train).map_err(fail)?;
    let grads = g.backward(loss.total).map_err(fail)?;
    if grads.params().iter().any(|(_, t)| !t.is_finite()) {
        return Err("non-finite gradient".into());
    }
    let registered = store.trainable_count();
    let formula = config.detector().map_err(fail)?;
    let analytic = formula.net.param_count() + formula.sdr.param_count();
    if registered != analytic || registered != detector.trainable_count(&store) {
        return Err(format!("registered {registered}, library formula {analytic}"));
    }
    Ok(registered)
}

pub fn ablation_config() -> TrainConfig {
    TrainConfig {
        n_voxels: 12,
        point_cap: 6,
        synthetic_boxes: 1,
        synthetic_points_per_box: 40,
        synthetic_clutter: 20,
        synthetic_ground: 20,
        ..micro_config()
    }
}

fn distinct(v: &[usize]) -> bool {
    let mut s = v.to_vec();
    s.sort_unstable();
    s.dedup();
    s.len() == v.len()
}

pub fn ablation_surface() -> Outcome {
    let base = ablation_config();
    let mut report = Vec::new();
    let mut ok = true;
    let mut axis = |name: &str, configs: Vec<TrainConfig>, want_distinct: bool| -> std::result::Result<(), String> {
        let mut counts = Vec::new();
        for c in &configs {
            let n = exercise(c).map_err(|e| format!("{name}: {e}"))?;
            let closed = closed_form_params(c);
            if n != closed {
                ok = false;
                report.push(format!("{name}: {n} registered vs closed form {closed}"));
            }
            counts.push(n);
        }
        let d = distinct(&counts);
        if want_distinct && !d {
            ok = false;
        }
        if want_distinct {
            report.push(format!("{name} {counts:?}"));
        } else {
            report.push(format!("{name} {counts:?} (no weights, equal by construction)"));
        }
        Ok(())
    };
    axis(
        "n",
        (1..=4)
            .map(|n| TrainConfig {
                attention_mlp: (0..n).map(|i| (4, 4 + i)).collect(),
                ..base.clone()
            })
            .collect(),
        true,
    )?;
    // k selects neighbors and owns no weights, so its counts coincide
    axis(
        "k",
        (1..=5).map(|k| TrainConfig { knn_k: k, ..base.clone() }).collect(),
        false,
    )?;
    axis(
        "gate",
        [GateMode::PerVoxel, GateMode::Off]
            .into_iter()
            .map(|gate| TrainConfig { gate, ..base.clone() })
            .collect(),
        true,
    )?;
    axis(
        "head",
        [SdrVariant::Sr, SdrVariant::Dr, SdrVariant::Sdr]
            .into_iter()
            .map(|head_variant| TrainConfig {
                head_variant,
                ..base.clone()
            })
            .collect(),
        true,
    )?;
    verdict(ok, report.join(", "))
}

// ---- 9 -------------------------------------------------------------------

pub fn random_calibration(r: &mut impl Rng) -> Calibration {
    let (a, b, c): (f64, f64, f64) = (r.random_range(-0.1..0.1), r.random_range(-0.1..0.1), r.random_range(-PI..PI));
    let rx = [[1.0, 0.0, 0.0], [0.0, a.cos(), -a.sin()], [0.0, a.sin(), a.cos()]];
    let ry = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
    let rz = [[c.cos(), -c.sin(), 0.0], [c.sin(), c.cos(), 0.0], [0.0, 0.0, 1.0]];
    let mul = |p: [[f64; 3]; 3], q: [[f64; 3]; 3]| {
        let mut o = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                o[i][j] = (0..3).map(|k| p[i][k] * q[k][j]).sum();
            }
        }
        o
    };
    Calibration {
        rotation: mul(Calibration::nominal().rotation, mul(rz, mul(ry, rx))),
        translation: [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)],
    }
}

fn random_label(r: &mut impl Rng) -> LabeledBox {
    let class = [ObjectClass::Car, ObjectClass::Pedestrian, ObjectClass::Cyclist, ObjectClass::DontCare][r.random_range(0..4)];
    let mut l = LabeledBox::new(random_box(r), class);
    if r.random_bool(0.5) {
        l.image = ImageFields {
            truncation: (r.random_range(0.0..1.0f64) * 100.0).round() / 100.0,
            occlusion: r.random_range(0..4),
            alpha: (r.random_range(-PI..PI) * 100.0).round() / 100.0,
            bbox2d: [10.0, 20.0, 200.0, (r.random_range(30.0..300.0f64) * 100.0).round() / 100.0],
        };
        l.difficulty = Difficulty::from_kitti(l.image.bbox2d[3] - l.image.bbox2d[1], l.image.occlusion, l.image.truncation);
    }
    l
}

fn box_gap(a: &Box7, b: &Box7) -> f64 {
    let (x, y) = (a.to_array(), b.to_array());
    (0..6).map(|i| (x[i] - y[i]).abs()).fold(angle_gap(a.theta, b.theta), f64::max)
}

pub fn format_fidelity(clouds: usize, label_sets: usize) -> Outcome {
    let mut r = rng(9);
    let path = std::path::Path::new("memory");
    let mut bytes_bad = 0;
    for _ in 0..clouds {
        let n = r.random_range(0..300);
        let mut raw = Vec::with_capacity(16 * n);
        for _ in 0..n {
            for v in [
                r.random_range(-80.0f32..80.0),
                r.random_range(-80.0f32..80.0),
                r.random_range(-3.0f32..3.0),
                r.random_range(0.0f32..=1.0),
            ] {
                raw.extend_from_slice(&v.to_le_bytes());
            }
        }
        let points = parse_velodyne(&raw, path).map_err(fail)?;
        let exact = points.iter().enumerate().all(|(i, p)| {
            let f = |k: usize| f32::from_le_bytes(raw[16 * i + 4 * k..16 * i + 4 * k + 4].try_into().unwrap()) as f64;
            p.x == f(0) && p.y == f(1) && p.z == f(2) && p.intensity == f(3)
        });
        if !exact || encode_velodyne(&points) != raw {
            bytes_bad += 1;
        }
    }
    let edge = parse_velodyne(&[], path).map_err(fail)?.is_empty()
        && matches!(parse_velodyne(&[0u8; 17], path), Err(voxgraph::Error::Truncated { len: 17, .. }));

    let mut label_err = 0.0f64;
    let mut class_bad = 0;
    let mut order_bad = 0;
    for set in 0..label_sets {
        let calib = if set % 2 == 0 { Calibration::nominal() } else { random_calibration(&mut r) };
        let labels: Vec<LabeledBox> = (0..r.random_range(0..12)).map(|_| random_label(&mut r)).collect();
        let parsed = parse_labels(&format_labels(&labels, &calib), &calib, path).map_err(fail)?;
        if parsed.len() != labels.len() {
            return Err(format!("{} labels written, {} read", labels.len(), parsed.len()));
        }
        for (l, (p, score)) in labels.iter().zip(&parsed) {
            label_err = label_err.max(box_gap(&l.bbox, &p.bbox));
            if p.class != l.class || p.image != l.image || p.difficulty != l.difficulty || score.is_some() {
                class_bad += 1;
            }
        }
        let dets: Vec<Detection> = labels
            .iter()
            .map(|l| Detection {
                bbox: l.bbox,
                class: l.class,
                score: (r.random_range(0.0..1.0f64) * 1e6).round() / 1e6,
            })
            .collect();
        let back = parse_labels(&format_detections(&dets, &calib), &calib, path).map_err(fail)?;
        let scores: Vec<f64> = back.iter().map(|(_, s)| s.unwrap_or(f64::NAN)).collect();
        if scores.windows(2).any(|w| w[0] < w[1]) {
            order_bad += 1;
        }
        let mut want = dets.clone();
        want.sort_by(|a, b| b.score.total_cmp(&a.score));
        for (d, (p, s)) in want.iter().zip(&back) {
            label_err = label_err.max(box_gap(&d.bbox, &p.bbox));
            if p.class != d.class || (s.unwrap() - d.score).abs() > 1e-6 {
                class_bad += 1;
            }
        }
    }
    verdict(
        bytes_bad == 0 && edge && label_err <= 1e-6 && class_bad == 0 && order_bad == 0,
        format!(
            "{clouds} velodyne clouds byte-exact: {}, {label_sets} label sets max field error {label_err:.1e}, \
             class/metadata mismatches {class_bad}, unsorted detection files {order_bad}",
            bytes_bad == 0 && edge
        ),
    )
}
