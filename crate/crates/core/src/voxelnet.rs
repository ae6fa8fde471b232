//! Voxel-graph feature network: point-wise MLP, gated local attention,
//! global KNN gate, per-voxel maxpool and scatter onto a BEV grid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{attention_scores, Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{build_knn_graph, KnnGraph, SphericalVoxel};
use crate::kitti::Point;
use crate::layers::{linear_forward, LayerParams, Mlp};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const NEIGHBOR_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    /// One learned gate per voxel and layer.
    PerVoxel,
    /// The per-voxel gates averaged into one scalar per layer.
    PerLayer,
    /// Gate fixed to 1; no global branch.
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputCoords {
    /// Offsets to the voxel seed point plus intensity.
    Relative,
    /// Absolute coordinates plus intensity.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoxelNetConfig {
    pub point_mlp: Vec<usize>,
    pub center_mlp: Vec<usize>,
    /// `(hidden, out)` of each attention layer's 2-layer MLP.
    pub attention: Vec<(usize, usize)>,
    pub k: usize,
    pub bev_channels: usize,
    pub gate: GateMode,
    pub coords: InputCoords,
    /// Multiplier on centroid coordinates fed to the center MLP.
    pub centroid_scale: f64,
}

impl Default for VoxelNetConfig {
    fn default() -> Self {
        Self {
            point_mlp: vec![64, 128, 128],
            center_mlp: vec![64, 128, 128],
            attention: vec![(128, 128), (128, 256), (512, 1024)],
            k: 3,
            bev_channels: 64,
            gate: GateMode::PerVoxel,
            coords: InputCoords::Relative,
            centroid_scale: 0.1,
        }
    }
}

fn linear_count(fin: usize, fout: usize) -> usize {
    fin * fout + fout
}

fn mlp_count(fin: usize, sizes: &[usize]) -> usize {
    let mut fin = fin;
    let mut n = 0;
    for &s in sizes {
        n += linear_count(fin, s);
        fin = s;
    }
    n
}

impl VoxelNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.point_mlp.is_empty() || self.attention.is_empty() {
            return Err(Error::Config("voxel net needs a point MLP and at least one attention layer".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("global graph needs k >= 1".into()));
        }
        if self.bev_channels == 0 {
            return Err(Error::Config("BEV channel count must be positive".into()));
        }
        if self.gate != GateMode::Off && self.center_mlp.last() != self.point_mlp.last() {
            return Err(Error::Config(
                "center MLP and point MLP must end with the same width".into(),
            ));
        }
        Ok(())
    }

    /// Width of each attention layer's input.
    pub fn layer_inputs(&self) -> Vec<usize> {
        let mut d = *self.point_mlp.last().expect("validated");
        self.attention
            .iter()
            .map(|&(_, o)| {
                let i = d;
                d = o;
                i
            })
            .collect()
    }

    pub fn output_width(&self) -> usize {
        self.attention.last().map_or(0, |a| a.1)
    }

    /// Analytic trainable parameter count.
    pub fn param_count(&self) -> usize {
        let mut n = mlp_count(4, &self.point_mlp);
        let inputs = self.layer_inputs();
        let layers = self.attention.len();
        if self.gate != GateMode::Off {
            n += mlp_count(3, &self.center_mlp);
        }
        for (m, (&(h, o), &d)) in self.attention.iter().zip(&inputs).enumerate() {
            n += mlp_count(d, &[h, o]);
            if self.gate != GateMode::Off {
                n += linear_count(d, 1);
                if m + 1 < layers {
                    n += mlp_count(d, &[h, o]);
                }
            }
        }
        n + linear_count(self.output_width(), self.bev_channels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BevConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub resolution: f64,
}

impl Default for BevConfig {
    fn default() -> Self {
        Self {
            x_min: 0.0,
            x_max: 70.4,
            y_min: -40.0,
            y_max: 40.0,
            resolution: 0.4,
        }
    }
}

impl BevConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0 && self.x_max > self.x_min && self.y_max > self.y_min) {
            return Err(Error::Config(format!("zero-area BEV grid {self:?}")));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        ((self.y_max - self.y_min) / self.resolution - 1e-9).ceil() as usize
    }

    pub fn width(&self) -> usize {
        ((self.x_max - self.x_min) / self.resolution - 1e-9).ceil() as usize
    }

    /// Flat `row * width + col` index of the cell containing `(x, y)`.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<usize> {
        if !(x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max) {
            return None;
        }
        let col = ((x - self.x_min) / self.resolution) as usize;
        let row = ((y - self.y_min) / self.resolution) as usize;
        (col < self.width() && row < self.height()).then(|| row * self.width() + col)
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_min + (col as f64 + 0.5) * self.resolution,
            self.y_min + (row as f64 + 0.5) * self.resolution,
        )
    }
}

/// Parameters of the voxel-graph network.
#[derive(Clone, Debug)]
pub struct VoxelGraphNet {
    pub config: VoxelNetConfig,
    pub point_mlp: Mlp,
    pub center_mlp: Option<Mlp>,
    pub attention: Vec<Mlp>,
    pub gates: Vec<LayerParams>,
    pub global: Vec<Mlp>,
    pub bev_proj: LayerParams,
}

/// Result of one forward pass.
#[derive(Clone, Debug)]
pub struct VoxelGraphOutput {
    /// `[C, H, W]` grid.
    pub bev: Var,
    /// `[N, d_final]` per-voxel maxpooled features.
    pub pooled: Var,
    /// Gate values of each layer, `[N]`.
    pub gates: Vec<Var>,
    /// Voxels whose centroid fell outside the grid.
    pub dropped: usize,
}

impl VoxelGraphNet {
    pub fn new(store: &mut ParamStore, name: &str, config: VoxelNetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let point_mlp = Mlp::new(store, &format!("{name}.point"), 4, &config.point_mlp, true, rng)?;
        let gated = config.gate != GateMode::Off;
        let center_mlp = if gated {
            Some(Mlp::new(store, &format!("{name}.center"), 3, &config.center_mlp, true, rng)?)
        } else {
            None
        };
        let inputs = config.layer_inputs();
        let layers = config.attention.len();
        let mut attention = Vec::with_capacity(layers);
        let mut gates = Vec::new();
        let mut global = Vec::new();
        for (m, (&(h, o), &d)) in config.attention.iter().zip(&inputs).enumerate() {
            attention.push(Mlp::new(store, &format!("{name}.attn{m}"), d, &[h, o], true, rng)?);
            if gated {
                gates.push(LayerParams::linear(store, &format!("{name}.gate{m}"), d, 1, rng)?);
                if m + 1 < layers {
                    global.push(Mlp::new(store, &format!("{name}.global{m}"), d, &[h, o], true, rng)?);
                }
            }
        }
        let bev_proj = LayerParams::linear(store, &format!("{name}.bev"), config.output_width(), config.bev_channels, rng)?;
        Ok(Self {
            config,
            point_mlp,
            center_mlp,
            attention,
            gates,
            global,
            bev_proj,
        })
    }

    pub fn trainable_count(&self, store: &ParamStore) -> usize {
        self.point_mlp.trainable_count(store)
            + self.center_mlp.as_ref().map_or(0, |m| m.trainable_count(store))
            + self.attention.iter().map(|m| m.trainable_count(store)).sum::<usize>()
            + self.gates.iter().map(|l| l.trainable_count(store)).sum::<usize>()
            + self.global.iter().map(|m| m.trainable_count(store)).sum::<usize>()
            + self.bev_proj.trainable_count(store)
    }

    /// Full forward for one scene.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        points: &[Point],
        voxels: &[SphericalVoxel],
        bev: &BevConfig,
    ) -> Result<VoxelGraphOutput> {
        bev.validate()?;
        let (rows, offsets) = voxel_inputs(points, voxels, self.config.coords)?;
        let x = g.constant(rows);
        let mut f = self.local_pointwise(g, store, x)?;

        let centroids: Vec<[f64; 3]> = voxels.iter().map(|v| v.centroid).collect();
        let n = voxels.len();
        let graph = if self.config.gate == GateMode::Off {
            None
        } else {
            Some(build_knn_graph(&centroids, self.config.k)?)
        };
        let mut fg = match (&self.center_mlp, &graph) {
            (Some(mlp), Some(_)) => {
                let s = self.config.centroid_scale;
                let data = centroids.iter().flat_map(|c| c.map(|v| v * s)).collect();
                let c = g.constant(Tensor::new(vec![n, 3], data)?);
                Some(mlp.forward(g, store, c)?)
            }
            _ => None,
        };

        let mut gates = Vec::with_capacity(self.attention.len());
        for m in 0..self.attention.len() {
            let (beta, aggregated) = match (fg, &graph) {
                (Some(fg_m), Some(graph)) => {
                    let (beta, agg) = global_attention_gate(g, store, fg_m, graph, &self.gates[m])?;
                    let beta = match self.config.gate {
                        GateMode::PerLayer => {
                            let mean = g.mean(beta)?;
                            g.broadcast(mean, vec![n])?
                        }
                        _ => beta,
                    };
                    (beta, Some(agg))
                }
                _ => (g.constant(Tensor::ones(vec![n])), None),
            };
            gates.push(beta);
            f = attention_layer(g, store, f, beta, &offsets, &self.attention[m])?;
            if let (Some(agg), Some(global)) = (aggregated, self.global.get(m)) {
                fg = Some(global.forward(g, store, agg)?);
            }
        }
        let pooled = g.segment_max(f, &offsets)?;
        let (grid, dropped) = self.scatter_to_bev(g, store, pooled, &centroids, bev)?;
        Ok(VoxelGraphOutput {
            bev: grid,
            pooled,
            gates,
            dropped,
        })
    }

    /// Point-wise MLP on stacked `[rows, 4]` voxel inputs.
    pub fn local_pointwise(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.point_mlp.forward(g, store, x)
    }

    /// Channel reduction, ReLU, then max-scatter of voxel rows onto the grid.
    pub fn scatter_to_bev(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        pooled: Var,
        centroids: &[[f64; 3]],
        bev: &BevConfig,
    ) -> Result<(Var, usize)> {
        let reduced = linear_forward(g, store, pooled, &self.bev_proj)?;
        let reduced = g.relu(reduced)?;
        scatter_to_bev(g, reduced, centroids, bev)
    }
}

/// Stacks per-voxel point rows into `[rows, 4]` with segment offsets.
pub fn voxel_inputs(points: &[Point], voxels: &[SphericalVoxel], coords: InputCoords) -> Result<(Tensor, Vec<usize>)> {
    let mut data = Vec::new();
    let mut offsets = Vec::with_capacity(voxels.len() + 1);
    offsets.push(0);
    for v in voxels {
        if v.member_indices.is_empty() {
            return Err(Error::Geometry("voxel without members".into()));
        }
        let seed = points
            .get(v.center_point_index)
            .ok_or_else(|| Error::Geometry("voxel seed out of range".into()))?;
        for &i in &v.member_indices {
            let p = points
                .get(i)
                .ok_or_else(|| Error::Geometry(format!("voxel member {i} out of range")))?;
            match coords {
                InputCoords::Relative => data.extend([p.x - seed.x, p.y - seed.y, p.z - seed.z, p.intensity]),
                InputCoords::Raw => data.extend([p.x, p.y, p.z, p.intensity]),
            }
        }
        offsets.push(offsets.last().unwrap() + v.member_indices.len());
    }
    let rows = *offsets.last().unwrap();
    Ok((Tensor::new(vec![rows, 4], data)?, offsets))
}

/// Softmax attention weights of one voxel's rows, `[t, t]` with a zero diagonal.
pub fn local_attention_scores(f: &Tensor) -> Result<Tensor> {
    let [t, d] = f.shape() else {
        return Err(Error::Shape(format!("attention expects [t, d], got {:?}", f.shape())));
    };
    Tensor::new(vec![*t, *t], attention_scores(f.data(), *t, *d))
}

/// Normalized neighbor aggregation of `fg` and a sigmoid gate per node.
///
/// Returns `(beta [N], aggregated [N, d])`.
pub fn global_attention_gate(
    g: &mut Graph,
    store: &ParamStore,
    fg: Var,
    graph: &KnnGraph,
    gate: &LayerParams,
) -> Result<(Var, Var)> {
    let n = g.shape(fg)[0];
    let agg = g.knn_aggregate(fg, &graph.neighbors, NEIGHBOR_EPS)?;
    let z = linear_forward(g, store, agg, gate)?;
    let beta = g.sigmoid(z)?;
    let beta = g.reshape(beta, vec![n])?;
    Ok((beta, agg))
}

/// Gated local aggregation followed by the layer MLP.
pub fn attention_layer(
    g: &mut Graph,
    store: &ParamStore,
    f: Var,
    beta: Var,
    offsets: &[usize],
    mlp: &Mlp,
) -> Result<Var> {
    let a = g.voxel_attention(f, beta, offsets)?;
    mlp.forward(g, store, a)
}

/// Max-scatter rows of `[N, C]` onto `[C, H, W]` at each centroid's cell.
pub fn scatter_to_bev(g: &mut Graph, features: Var, centroids: &[[f64; 3]], bev: &BevConfig) -> Result<(Var, usize)> {
    bev.validate()?;
    let cells: Vec<Option<usize>> = centroids.iter().map(|c| bev.cell_of(c[0], c[1])).collect();
    let dropped = cells.iter().filter(|c| c.is_none()).count();
    if dropped > 0 {
        log::debug!("{dropped} voxels outside the BEV grid");
    }
    let grid = g.scatter_max(features, &cells, bev.height(), bev.width())?;
    Ok((grid, dropped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_voxels, VoxelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> VoxelNetConfig {
        VoxelNetConfig {
            point_mlp: vec![8, 8],
            center_mlp: vec![8, 8],
            attention: vec![(8, 8), (8, 12)],
            k: 2,
            bev_channels: 4,
            ..Default::default()
        }
    }

    fn cloud(n: usize, seed: u64) -> Vec<Point> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Point::new(
                    rng.random_range(1.0..7.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(0.0..1.0),
                )
            })
            .collect()
    }

    fn small_grid() -> BevConfig {
        BevConfig {
            x_min: 0.0,
            x_max: 8.0,
            y_min: -4.0,
            y_max: 4.0,
            resolution: 0.5,
        }
    }

    #[test]
    fn param_count_matches_formula() {
        for gate in [GateMode::PerVoxel, GateMode::PerLayer, GateMode::Off] {
            let mut store = ParamStore::new();
            let cfg = VoxelNetConfig { gate, ..Default::default() };
            let net = VoxelGraphNet::new(&mut store, "vg", cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(net.trainable_count(&store), cfg.param_count());
            assert_eq!(store.trainable_count(), cfg.param_count());
        }
    }

    #[test]
    fn attention_scores_examples() {
        let two = Tensor::new(vec![2, 2], vec![0.3, 1.0, -2.0, 0.5]).unwrap();
        let a = local_attention_scores(&two).unwrap();
        assert_eq!(a.data(), &[0.0, 1.0, 1.0, 0.0]);
        let same = Tensor::new(vec![4, 2], vec![1.0, 2.0].repeat(4)).unwrap();
        let a = local_attention_scores(&same).unwrap();
        for j in 0..4 {
            for k in 0..4 {
                let want = if j == k { 0.0 } else { 1.0 / 3.0 };
                assert!((a.at2(j, k) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_shapes_and_gates() {
        let pts = cloud(200, 3);
        let xyz: Vec<[f64; 3]> = pts.iter().map(|p| p.xyz()).collect();
        let voxels = build_voxels(
            &xyz,
            &VoxelConfig {
                n_voxels: 12,
                radius: 1.2,
                point_cap: 16,
                seed_index: 0,
            },
        )
        .unwrap();
        let mut store = ParamStore::new();
        let net = VoxelGraphNet::new(&mut store, "vg", tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut g = Graph::new();
        let out = net.forward(&mut g, &store, &pts, &voxels, &small_grid()).unwrap();
        assert_eq!(g.shape(out.pooled), &[12, 12]);
        assert_eq!(g.shape(out.bev), &[4, 16, 16]);
        assert_eq!(out.dropped, 0);
        for b in &out.gates {
            assert!(g.value(*b).data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn too_few_voxels_for_graph() {
        let pts = cloud(20, 4);
        let xyz: Vec<[f64; 3]> = pts.iter().map(|p| p.xyz()).collect();
        let voxels = build_voxels(
            &xyz,
            &VoxelConfig {
                n_voxels: 2,
                radius: 1.0,
                point_cap: 8,
                seed_index: 0,
            },
        )
        .unwrap();
        let mut store = ParamStore::new();
        let net = VoxelGraphNet::new(&mut store, "vg", tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(net.forward(&mut Graph::new(), &store, &pts, &voxels, &small_grid()).is_err());
    }

    #[test]
    fn bev_scatter_oracles() {
        let grid = small_grid();
        assert_eq!((grid.height(), grid.width()), (16, 16));
        let mut g = Graph::new();
        let empty = g.constant(Tensor::zeros(vec![0, 2]));
        let (v, _) = scatter_to_bev(&mut g, empty, &[], &grid).unwrap();
        assert!(g.value(v).data().iter().all(|&x| x == 0.0));

        let f = g.constant(Tensor::new(vec![3, 2], vec![1.0, 5.0, 3.0, 2.0, 9.0, 9.0]).unwrap());
        let c = [[4.1, 0.1, 0.0], [4.2, 0.2, 0.0], [100.0, 0.0, 0.0]];
        let (v, dropped) = scatter_to_bev(&mut g, f, &c, &grid).unwrap();
        assert_eq!(dropped, 1);
        let cell = grid.cell_of(4.1, 0.1).unwrap();
        let t = g.value(v);
        assert_eq!(t.data()[cell], 3.0);
        assert_eq!(t.data()[256 + cell], 5.0);
        assert_eq!(t.data().iter().filter(|&&x| x != 0.0).count(), 2);
        let bad = BevConfig { resolution: 0.0, ..grid };
        assert!(scatter_to_bev(&mut g, f, &c, &bad).is_err());
    }
}
