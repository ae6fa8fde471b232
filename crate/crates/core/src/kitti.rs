//! KITTI on-disk formats: velodyne point clouds, label text files,
//! calibration and split lists.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::boxes::{normalize_angle, Box7};
use crate::error::{Error, Result};

/// One LIDAR return in the sensor frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Self { x, y, z, intensity }
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ObjectClass {
    Car,
    Pedestrian,
    Cyclist,
    DontCare,
}

impl ObjectClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ObjectClass::Car => "Car",
            ObjectClass::Pedestrian => "Pedestrian",
            ObjectClass::Cyclist => "Cyclist",
            ObjectClass::DontCare => "DontCare",
        }
    }

    /// Maps a KITTI type string; types outside the three evaluated classes
    /// become `DontCare`.
    pub fn parse(s: &str) -> Self {
        match s {
            "Car" => ObjectClass::Car,
            "Pedestrian" => ObjectClass::Pedestrian,
            "Cyclist" => ObjectClass::Cyclist,
            _ => ObjectClass::DontCare,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
    Unknown,
}

impl Difficulty {
    /// KITTI difficulty from 2D box height (pixels), occlusion level and
    /// truncation; objects failing every level are `Unknown`.
    pub fn from_kitti(bbox_height: f64, occlusion: i32, truncation: f64) -> Self {
        if bbox_height >= 40.0 && occlusion <= 0 && truncation <= 0.15 {
            Difficulty::Easy
        } else if bbox_height >= 25.0 && occlusion <= 1 && truncation <= 0.30 {
            Difficulty::Moderate
        } else if bbox_height >= 25.0 && occlusion <= 2 && truncation <= 0.50 {
            Difficulty::Hard
        } else {
            Difficulty::Unknown
        }
    }
}

/// Image-space fields of a KITTI label row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageFields {
    pub truncation: f64,
    pub occlusion: i32,
    pub alpha: f64,
    pub bbox2d: [f64; 4],
}

impl ImageFields {
    /// Placeholder written for detections, which carry no image data.
    pub const ABSENT: ImageFields = ImageFields {
        truncation: -1.0,
        occlusion: -1,
        alpha: -10.0,
        bbox2d: [-1.0; 4],
    };

    pub fn is_present(&self) -> bool {
        self.truncation >= 0.0 && self.occlusion >= 0 && self.bbox2d.iter().all(|v| *v >= 0.0)
    }
}

/// Ground-truth box in the LIDAR frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledBox {
    pub bbox: Box7,
    pub class: ObjectClass,
    pub difficulty: Difficulty,
    pub image: ImageFields,
}

impl LabeledBox {
    pub fn new(bbox: Box7, class: ObjectClass) -> Self {
        Self {
            bbox,
            class,
            difficulty: Difficulty::Unknown,
            image: ImageFields::ABSENT,
        }
    }
}

/// A scored box produced by the detector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: Box7,
    pub class: ObjectClass,
    pub score: f64,
}

/// Rigid LIDAR-to-camera transform `p_cam = R p_lidar + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Calibration {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn mat_inv(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let c = |r0: usize, c0: usize, r1: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let cof = [
        [c(1, 1, 2, 2), -c(1, 0, 2, 2), c(1, 0, 2, 1)],
        [-c(0, 1, 2, 2), c(0, 0, 2, 2), -c(0, 0, 2, 1)],
        [c(0, 1, 1, 2), -c(0, 0, 1, 2), c(0, 0, 1, 1)],
    ];
    let det = m[0][0] * cof[0][0] + m[0][1] * cof[0][1] + m[0][2] * cof[0][2];
    if det.abs() < 1e-12 {
        return None;
    }
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            inv[i][j] = cof[j][i] / det;
        }
    }
    Some(inv)
}

impl Calibration {
    /// The fixed KITTI axis convention with no sensor offset: camera x is
    /// LIDAR -y, camera y is LIDAR -z, camera z is LIDAR x.
    pub fn nominal() -> Self {
        Self {
            rotation: [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]],
            translation: [0.0; 3],
        }
    }

    fn inverse_rotation(&self) -> [[f64; 3]; 3] {
        mat_inv(&self.rotation).expect("calibration rotation is invertible")
    }

    pub fn lidar_to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = mat_vec(&self.rotation, p);
        [0, 1, 2].map(|i| r[i] + self.translation[i])
    }

    pub fn camera_to_lidar(&self, p: [f64; 3]) -> [f64; 3] {
        let q = [0, 1, 2].map(|i| p[i] - self.translation[i]);
        mat_vec(&self.inverse_rotation(), q)
    }

    /// Reads `R0_rect` and `Tr_velo_to_cam` from a KITTI calibration file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut r0 = None;
        let mut tr = None;
        for (i, line) in text.lines().enumerate() {
            let Some((key, rest)) = line.split_once(':') else { continue };
            let parse = || -> Result<Vec<f64>> {
                rest.split_whitespace()
                    .map(|v| {
                        v.parse::<f64>().map_err(|_| Error::Parse {
                            path: path.to_path_buf(),
                            line: i + 1,
                            msg: format!("bad number `{v}`"),
                        })
                    })
                    .collect()
            };
            match key.trim() {
                "R0_rect" => r0 = Some((i + 1, parse()?)),
                "Tr_velo_to_cam" => tr = Some((i + 1, parse()?)),
                _ => {}
            }
        }
        let arity = |found: Option<(usize, Vec<f64>)>, n: usize, name: &str| -> Result<Vec<f64>> {
            match found {
                Some((_, v)) if v.len() == n => Ok(v),
                Some((line, v)) => Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("{name} has {} values, expected {n}", v.len()),
                }),
                None => Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: 0,
                    msg: format!("missing {name}"),
                }),
            }
        };
        let r0 = arity(r0, 9, "R0_rect")?;
        let tr = arity(tr, 12, "Tr_velo_to_cam")?;
        let r0m = [[r0[0], r0[1], r0[2]], [r0[3], r0[4], r0[5]], [r0[6], r0[7], r0[8]]];
        let trm = [[tr[0], tr[1], tr[2]], [tr[4], tr[5], tr[6]], [tr[8], tr[9], tr[10]]];
        let rotation = mat_mul(&r0m, &trm);
        if mat_inv(&rotation).is_none() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                msg: "singular calibration".into(),
            });
        }
        let translation = mat_vec(&r0m, [tr[3], tr[7], tr[11]]);
        Ok(Self { rotation, translation })
    }

    /// LIDAR box from camera-frame label fields (bottom-center location,
    /// `h w l`, rotation about camera y).
    pub fn box_from_camera(&self, loc: [f64; 3], hwl: [f64; 3], rotation_y: f64) -> Box7 {
        let [h, w, l] = hwl;
        let center = self.camera_to_lidar([loc[0], loc[1] - h / 2.0, loc[2]]);
        // The heading whose camera image has this rotation_y: R*u must be
        // orthogonal to (sin ry, 0, cos ry) and point along (cos ry, 0, -sin ry).
        let (s, c) = rotation_y.sin_cos();
        let r = &self.rotation;
        let n = [0, 1].map(|j| r[0][j] * s + r[2][j] * c);
        let mut theta = n[0].atan2(-n[1]);
        let (ts, tc) = theta.sin_cos();
        let ahead = [0, 2].map(|i| r[i][0] * tc + r[i][1] * ts);
        if ahead[0] * c - ahead[1] * s < 0.0 {
            theta += std::f64::consts::PI;
        }
        Box7::new(center[0], center[1], center[2], l, w, h, theta)
    }

    /// Inverse of [`Calibration::box_from_camera`]: `(location, [h, w, l], rotation_y)`.
    pub fn box_to_camera(&self, b: &Box7) -> ([f64; 3], [f64; 3], f64) {
        let c = self.lidar_to_camera([b.x, b.y, b.z]);
        let dir = mat_vec(&self.rotation, [b.theta.cos(), b.theta.sin(), 0.0]);
        let ry = normalize_angle((-dir[2]).atan2(dir[0]));
        ([c[0], c[1] + b.h / 2.0, c[2]], [b.h, b.w, b.l], ry)
    }
}

impl Default for Calibration {
    fn default() -> Self {
        Self::nominal()
    }
}

/// A point cloud with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub points: Vec<Point>,
    pub labels: Vec<LabeledBox>,
    pub calib: Calibration,
}

/// Reads a KITTI velodyne file: consecutive little-endian `f32` quadruples
/// `(x, y, z, intensity)`. Intensity is clamped to `[0, 1]`.
pub fn load_velodyne(path: impl AsRef<Path>) -> Result<Vec<Point>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_velodyne(&bytes, path)
}

pub fn parse_velodyne(bytes: &[u8], path: &Path) -> Result<Vec<Point>> {
    if bytes.len() % 16 != 0 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            len: bytes.len() as u64,
        });
    }
    bytes
        .chunks_exact(16)
        .enumerate()
        .map(|(index, rec)| {
            let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().expect("4 bytes")) as f64;
            let (x, y, z, i) = (f(0), f(1), f(2), f(3));
            if !(x.is_finite() && y.is_finite() && z.is_finite() && i.is_finite()) {
                return Err(Error::NonFiniteRecord {
                    path: path.to_path_buf(),
                    index,
                });
            }
            Ok(Point::new(x, y, z, i.clamp(0.0, 1.0)))
        })
        .collect()
}

pub fn encode_velodyne(points: &[Point]) -> Vec<u8> {
    let mut out = Vec::with_capacity(points.len() * 16);
    for p in points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn save_velodyne(path: impl AsRef<Path>, points: &[Point]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_velodyne(points)).map_err(|e| Error::io(path, e))
}

/// Parses KITTI label text into LIDAR-frame boxes. A 16th column, when
/// present, is read as a detection score and returned alongside.
pub fn parse_labels(text: &str, calib: &Calibration, path: &Path) -> Result<Vec<(LabeledBox, Option<f64>)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        if fields.len() != 15 && fields.len() != 16 {
            return Err(err(format!("expected 15 or 16 fields, found {}", fields.len())));
        }
        let num = |k: usize| -> Result<f64> {
            fields[k]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("field {} (`{}`) is not a finite number", k + 1, fields[k])))
        };
        let class = ObjectClass::parse(fields[0]);
        let image = ImageFields {
            truncation: num(1)?,
            occlusion: num(2)? as i32,
            alpha: num(3)?,
            bbox2d: [num(4)?, num(5)?, num(6)?, num(7)?],
        };
        let hwl = [num(8)?, num(9)?, num(10)?];
        let loc = [num(11)?, num(12)?, num(13)?];
        let ry = num(14)?;
        let score = if fields.len() == 16 { Some(num(15)?) } else { None };
        if class != ObjectClass::DontCare && hwl.iter().any(|v| *v <= 0.0) {
            return Err(err("box extents must be positive".into()));
        }
        let bbox = calib.box_from_camera(loc, hwl, ry);
        let difficulty = if image.is_present() {
            Difficulty::from_kitti(image.bbox2d[3] - image.bbox2d[1], image.occlusion, image.truncation)
        } else {
            Difficulty::Unknown
        };
        out.push((
            LabeledBox {
                bbox,
                class,
                difficulty,
                image,
            },
            score,
        ));
    }
    Ok(out)
}

pub fn load_labels(path: impl AsRef<Path>, calib: &Calibration) -> Result<Vec<LabeledBox>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_labels(&text, calib, path)?.into_iter().map(|(b, _)| b).collect())
}

/// Reads a detection file written by [`save_detections`].
pub fn load_detections(path: impl AsRef<Path>, calib: &Calibration) -> Result<Vec<Detection>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_labels(&text, calib, path)?
        .into_iter()
        .map(|(b, s)| Detection {
            bbox: b.bbox,
            class: b.class,
            score: s.unwrap_or(1.0),
        })
        .collect())
}

fn label_line(class: ObjectClass, image: &ImageFields, b: &Box7, calib: &Calibration, score: Option<f64>) -> String {
    let (loc, hwl, ry) = calib.box_to_camera(b);
    let mut s = format!(
        "{} {:.2} {} {:.2} {:.2} {:.2} {:.2} {:.2}",
        class.as_str(),
        image.truncation,
        image.occlusion,
        image.alpha,
        image.bbox2d[0],
        image.bbox2d[1],
        image.bbox2d[2],
        image.bbox2d[3]
    );
    for v in hwl.iter().chain(&loc).chain([ry].iter()) {
        write!(s, " {v:.8}").expect("write to string");
    }
    if let Some(score) = score {
        write!(s, " {score:.8}").expect("write to string");
    }
    s
}

/// KITTI label text for ground-truth boxes (15 columns).
pub fn format_labels(labels: &[LabeledBox], calib: &Calibration) -> String {
    labels
        .iter()
        .map(|l| label_line(l.class, &l.image, &l.bbox, calib, None) + "\n")
        .collect()
}

/// KITTI label text for detections with the score column, highest score first.
pub fn format_detections(detections: &[Detection], calib: &Calibration) -> String {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score).then(a.cmp(&b)));
    order
        .into_iter()
        .map(|i| {
            let d = &detections[i];
            label_line(d.class, &ImageFields::ABSENT, &d.bbox, calib, Some(d.score)) + "\n"
        })
        .collect()
}

/// Writes `<dir>/<scene_id>.txt` and returns its path.
pub fn save_detections(
    dir: impl AsRef<Path>,
    scene_id: &str,
    detections: &[Detection],
    calib: &Calibration,
) -> Result<PathBuf> {
    let path = dir.as_ref().join(format!("{scene_id}.txt"));
    fs::write(&path, format_detections(detections, calib)).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn save_labels(path: impl AsRef<Path>, labels: &[LabeledBox], calib: &Calibration) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_labels(labels, calib)).map_err(|e| Error::io(path, e))
}

/// One scene id per line; blank lines and `#` comments are skipped.
pub fn load_split(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

/// A KITTI-layout directory with `velodyne/`, `label_2/` and `calib/`.
#[derive(Clone, Debug)]
pub struct KittiDataset {
    pub root: PathBuf,
}

impl KittiDataset {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// Scene ids from a split file, or every velodyne file when `split` is `None`.
    pub fn ids(&self, split: Option<&Path>) -> Result<Vec<String>> {
        if let Some(split) = split {
            return load_split(split);
        }
        let dir = self.root.join("velodyne");
        let mut ids: Vec<String> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let p = e.path();
                (p.extension()? == "bin").then(|| p.file_stem()?.to_str().map(String::from))?
            })
            .collect();
        ids.sort();
        Ok(ids)
    }

    pub fn load_scene(&self, id: &str) -> Result<Scene> {
        let calib_path = self.root.join("calib").join(format!("{id}.txt"));
        let calib = if calib_path.exists() {
            Calibration::load(&calib_path)?
        } else {
            Calibration::nominal()
        };
        let points = load_velodyne(self.root.join("velodyne").join(format!("{id}.bin")))?;
        let label_path = self.root.join("label_2").join(format!("{id}.txt"));
        let labels = if label_path.exists() {
            load_labels(&label_path, &calib)?
        } else {
            Vec::new()
        };
        Ok(Scene {
            id: id.to_string(),
            points,
            labels,
            calib,
        })
    }

    /// Writes a scene in KITTI layout, creating the directories as needed.
    pub fn write_scene(&self, scene: &Scene) -> Result<()> {
        for sub in ["velodyne", "label_2"] {
            let d = self.root.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        save_velodyne(self.root.join("velodyne").join(format!("{}.bin", scene.id)), &scene.points)?;
        save_labels(
            self.root.join("label_2").join(format!("{}.txt", scene.id)),
            &scene.labels,
            &scene.calib,
        )
    }
}
