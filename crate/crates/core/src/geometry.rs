//! Point sampling, spherical voxel grouping and the voxel KNN graph.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const DEFAULT_POINT_CAP: usize = 64;

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Greedy max-min sampling starting from `seed_index`.
///
/// Ties go to the lowest index.
pub fn farthest_point_sample(points: &[[f64; 3]], n: usize, seed_index: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Geometry("farthest point sampling needs N >= 1".into()));
    }
    if n > points.len() {
        return Err(Error::Geometry(format!("cannot sample {n} points from {}", points.len())));
    }
    if seed_index >= points.len() {
        return Err(Error::Geometry(format!("seed index {seed_index} out of range")));
    }
    let mut picked = Vec::with_capacity(n);
    let mut nearest = vec![f64::INFINITY; points.len()];
    let mut taken = vec![false; points.len()];
    let mut current = seed_index;
    loop {
        picked.push(current);
        taken[current] = true;
        if picked.len() == n {
            return Ok(picked);
        }
        let c = points[current];
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            let d = dist2(p, &c);
            if d < nearest[i] {
                nearest[i] = d;
            }
            if !taken[i] && best.is_none_or(|(_, bd)| nearest[i] > bd) {
                best = Some((i, nearest[i]));
            }
        }
        current = best.expect("n <= point count leaves a candidate").0;
    }
}

/// Linear-scan ball query: indices strictly closer than `r`, ascending.
pub fn ball_query_brute(points: &[[f64; 3]], center_index: usize, r: f64) -> Vec<usize> {
    let c = points[center_index];
    let r2 = r * r;
    (0..points.len()).filter(|&i| dist2(&points[i], &c) < r2).collect()
}

/// Uniform hash grid with cell size `r` for radius queries.
#[derive(Clone, Debug)]
pub struct HashGrid {
    cell: f64,
    buckets: HashMap<(i64, i64, i64), Vec<usize>>,
}

impl HashGrid {
    pub fn new(points: &[[f64; 3]], cell: f64) -> Result<Self> {
        if !(cell > 0.0 && cell.is_finite()) {
            return Err(Error::Geometry(format!("grid cell size must be positive, got {cell}")));
        }
        let mut buckets: HashMap<_, Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(Self::key(p, cell)).or_default().push(i);
        }
        Ok(Self { cell, buckets })
    }

    fn key(p: &[f64; 3], cell: f64) -> (i64, i64, i64) {
        (
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        )
    }

    /// Indices within distance `< r` of `center` (requires `r <= cell`), ascending.
    pub fn query(&self, points: &[[f64; 3]], center: &[f64; 3], r: f64) -> Vec<usize> {
        debug_assert!(r <= self.cell);
        let (kx, ky, kz) = Self::key(center, self.cell);
        let r2 = r * r;
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(b) = self.buckets.get(&(kx + dx, ky + dy, kz + dz)) {
                        out.extend(b.iter().copied().filter(|&i| dist2(&points[i], center) < r2));
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Indices strictly within `r` of `points[center_index]`, ascending; includes the center.
pub fn ball_query(points: &[[f64; 3]], center_index: usize, r: f64) -> Result<Vec<usize>> {
    if !(r > 0.0) {
        return Err(Error::Geometry(format!("ball radius must be positive, got {r}")));
    }
    if center_index >= points.len() {
        return Err(Error::Geometry(format!("center index {center_index} out of range")));
    }
    let grid = HashGrid::new(points, r)?;
    Ok(grid.query(points, &points[center_index], r))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SphericalVoxel {
    pub center_point_index: usize,
    pub member_indices: Vec<usize>,
    pub centroid: [f64; 3],
}

/// Keeps `cap` of `members` by even striding; the seed is always retained.
pub fn stride_subsample(members: &[usize], seed: usize, cap: usize) -> Vec<usize> {
    if members.len() <= cap || cap == 0 {
        return members.to_vec();
    }
    let n = members.len();
    let mut out: Vec<usize> = (0..cap).map(|i| members[i * n / cap]).collect();
    if !out.contains(&seed) {
        // Replace the sample nearest to the seed's position in the member list.
        let pos = members.binary_search(&seed).unwrap_or(0);
        let slot = (pos * cap / n).min(cap - 1);
        out[slot] = seed;
        out.sort_unstable();
        out.dedup();
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelConfig {
    pub n_voxels: usize,
    pub radius: f64,
    pub point_cap: usize,
    pub seed_index: usize,
}

impl Default for VoxelConfig {
    fn default() -> Self {
        Self {
            n_voxels: 1024,
            radius: 1.0,
            point_cap: DEFAULT_POINT_CAP,
            seed_index: 0,
        }
    }
}

/// One voxel per farthest-point pick; spheres may overlap.
pub fn build_voxels(points: &[[f64; 3]], config: &VoxelConfig) -> Result<Vec<SphericalVoxel>> {
    let seeds = farthest_point_sample(points, config.n_voxels, config.seed_index)?;
    if !(config.radius > 0.0) {
        return Err(Error::Geometry(format!("ball radius must be positive, got {}", config.radius)));
    }
    let grid = HashGrid::new(points, config.radius)?;
    Ok(seeds
        .into_iter()
        .map(|s| {
            let all = grid.query(points, &points[s], config.radius);
            let member_indices = stride_subsample(&all, s, config.point_cap);
            let mut centroid = [0.0; 3];
            for &m in &member_indices {
                for (c, v) in centroid.iter_mut().zip(points[m]) {
                    *c += v;
                }
            }
            let n = member_indices.len() as f64;
            centroid.iter_mut().for_each(|c| *c /= n);
            SphericalVoxel {
                center_point_index: s,
                member_indices,
                centroid,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnnGraph {
    pub k: usize,
    pub neighbors: Vec<Vec<usize>>,
}

/// Exact k nearest neighbours (excluding self); ties go to the lower index.
pub fn build_knn_graph(centroids: &[[f64; 3]], k: usize) -> Result<KnnGraph> {
    let n = centroids.len();
    if k == 0 {
        return Err(Error::Geometry("KNN graph needs k >= 1".into()));
    }
    if k >= n {
        return Err(Error::Geometry(format!("KNN graph needs k < N, got k={k}, N={n}")));
    }
    let neighbors = (0..n)
        .map(|i| {
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (dist2(&centroids[i], &centroids[j]), j))
                .collect();
            cand.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.truncate(k);
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.into_iter().map(|(_, j)| j).collect()
        })
        .collect();
    Ok(KnnGraph { k, neighbors })
}
