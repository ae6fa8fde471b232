//! Desk-scale synthetic scenes: box-shaped objects sampled on their surfaces
//! over a flat ground with uniform clutter.

use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::boxes::{AnchorSpec, Box7};
use crate::error::{Error, Result};
use crate::kitti::{Calibration, LabeledBox, Point, Scene};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_boxes: usize,
    pub points_per_box: usize,
    pub n_clutter: usize,
    pub n_ground: usize,
    /// `(x_min, x_max, y_min, y_max)` in meters.
    pub extent: (f64, f64, f64, f64),
    pub ground_z: f64,
    pub noise_sigma: f64,
    /// Relative jitter applied to each box extent.
    pub size_jitter: f64,
    /// Object prior; headings are drawn from its heading set.
    pub object: AnchorSpec,
    /// Training scenes must contain at least one box.
    pub training: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let object = AnchorSpec::car();
        Self {
            n_boxes: 3,
            points_per_box: 160,
            n_clutter: 300,
            n_ground: 600,
            extent: (0.0, 32.0, -16.0, 16.0),
            ground_z: object.z - object.h / 2.0,
            noise_sigma: 0.02,
            size_jitter: 0.05,
            object,
            training: true,
        }
    }
}

/// Samples a scene; a pure function of `config` and `seed`.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<Scene> {
    if config.training && config.n_boxes == 0 {
        return Err(Error::Config("a training scene needs at least one box".into()));
    }
    let (x0, x1, y0, y1) = config.extent;
    if !(x1 > x0 && y1 > y0) {
        return Err(Error::Config(format!("empty synthetic extent {:?}", config.extent)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, config.noise_sigma.max(0.0))
        .map_err(|e| Error::Config(format!("noise sigma: {e}")))?;

    let spec = &config.object;
    let margin = 0.5 * (spec.l * spec.l + spec.w * spec.w).sqrt() * (1.0 + config.size_jitter) + 0.2;
    let mut boxes: Vec<Box7> = Vec::with_capacity(config.n_boxes);
    let mut attempts = 0;
    while boxes.len() < config.n_boxes {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::Config(format!("cannot place {} separated boxes", config.n_boxes)));
        }
        if x1 - x0 <= 2.0 * margin || y1 - y0 <= 2.0 * margin {
            return Err(Error::Config("synthetic extent too small for the object size".into()));
        }
        let jitter = |rng: &mut ChaCha8Rng| 1.0 + rng.random_range(-1.0..=1.0) * config.size_jitter;
        let (l, w, h) = (spec.l * jitter(&mut rng), spec.w * jitter(&mut rng), spec.h * jitter(&mut rng));
        let heading = if spec.headings.is_empty() {
            0.0
        } else {
            spec.headings[rng.random_range(0..spec.headings.len())]
        };
        let x = rng.random_range(x0 + margin..x1 - margin);
        let y = rng.random_range(y0 + margin..y1 - margin);
        let b = Box7::new(x, y, config.ground_z + h / 2.0, l, w, h, heading);
        let clear = boxes.iter().all(|o| {
            let d = ((o.x - b.x).powi(2) + (o.y - b.y).powi(2)).sqrt();
            d > o.bev_radius() + b.bev_radius() + 0.5
        });
        if clear {
            boxes.push(b);
        }
    }

    let mut points = Vec::new();
    for b in &boxes {
        let intensity = rng.random_range(0.3..0.9);
        for _ in 0..config.points_per_box {
            let [px, py, pz] = sample_box_surface(b, &mut rng);
            points.push(Point::new(
                px + noise.sample(&mut rng),
                py + noise.sample(&mut rng),
                pz + noise.sample(&mut rng),
                (intensity + rng.random_range(-0.05..0.05f64)).clamp(0.0, 1.0),
            ));
        }
    }
    for _ in 0..config.n_ground {
        points.push(Point::new(
            rng.random_range(x0..x1),
            rng.random_range(y0..y1),
            config.ground_z + noise.sample(&mut rng),
            rng.random_range(0.0..0.2),
        ));
    }
    for _ in 0..config.n_clutter {
        points.push(Point::new(
            rng.random_range(x0..x1),
            rng.random_range(y0..y1),
            config.ground_z + rng.random_range(0.0..2.5),
            rng.random_range(0.0..1.0),
        ));
    }
    let labels = boxes
        .into_iter()
        .map(|b| LabeledBox::new(b, spec.class))
        .collect();
    Ok(Scene {
        id: format!("synthetic_{seed:06}"),
        points,
        labels,
        calib: Calibration::nominal(),
    })
}

/// Uniform sample over the top and four side faces (the bottom rests on the ground).
fn sample_box_surface(b: &Box7, rng: &mut impl Rng) -> [f64; 3] {
    let top = b.l * b.w;
    let long = b.l * b.h;
    let short = b.w * b.h;
    let total = top + 2.0 * long + 2.0 * short;
    let pick = rng.random_range(0.0..total);
    let (hl, hw, hh) = (b.l / 2.0, b.w / 2.0, b.h / 2.0);
    let u = rng.random_range(-1.0..=1.0);
    let v = rng.random_range(-1.0..=1.0);
    let (lx, ly, lz) = if pick < top {
        (u * hl, v * hw, hh)
    } else if pick < top + long {
        (u * hl, hw, v * hh)
    } else if pick < top + 2.0 * long {
        (u * hl, -hw, v * hh)
    } else if pick < top + 2.0 * long + short {
        (hl, u * hw, v * hh)
    } else {
        (-hl, u * hw, v * hh)
    };
    let (s, c) = b.theta.sin_cos();
    [b.x + c * lx - s * ly, b.y + s * lx + c * ly, b.z + lz]
}

/// Euclidean distance from a point to the surface of a box.
pub fn distance_to_box_surface(b: &Box7, p: [f64; 3]) -> f64 {
    let (s, c) = b.theta.sin_cos();
    let (dx, dy) = (p[0] - b.x, p[1] - b.y);
    let local = [c * dx + s * dy, -s * dx + c * dy, p[2] - b.z];
    let half = [b.l / 2.0, b.w / 2.0, b.h / 2.0];
    let q: Vec<f64> = (0..3).map(|i| local[i].abs() - half[i]).collect();
    let outside = q.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
    if outside > 0.0 {
        outside
    } else {
        -q.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Heading set used by the synthetic presets: objects are axis-placed.
pub const AXIS_HEADINGS: [f64; 2] = [0.0, FRAC_PI_2];
